"""Geometry of the range-R integer lattice.

Sites live in Z^d (d in {1, 2, 3}) in R-scaled integer coordinates: two
sites are adjacent when 0 < ||x - y||_inf <= R, so every site has
(2R+1)^d - 1 neighbours.  Exact integer arithmetic throughout.

Hot loops elsewhere in the package operate on packed int64 keys rather
than coordinate tuples; ``pack_coords`` documents the layout.  Packing is
affine per axis, which makes ``key(x + delta) == key(x) + delta_key`` as
long as every coordinate stays within the packing range, and numeric key
order coincides with lexicographic order on coordinate tuples.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, NamedTuple, Sequence

import numpy as np

Site = tuple  # tuple of d ints, R-scaled lattice units

# Public operations accept coordinates up to the int32 guard; the packed
# fast path is narrower (see PACK_COORD_LIMIT below).
COORD_LIMIT = 2**31 - 1

# Packed key layout: d fields of 21 bits, axis 0 most significant.
# Field value = coordinate + PACK_OFFSET, so coordinates in
# [-(2^20 - 1), 2^20 - 1] pack into a nonnegative int64 (< 2^63).
PACK_FIELD_BITS = 21
PACK_OFFSET = 1 << 20
PACK_COORD_LIMIT = PACK_OFFSET - 1


class LatticeError(ValueError):
    """Invalid lattice parameters or out-of-range coordinates."""


@dataclass(frozen=True)
class LatticeParams:
    """Dimension and range of the lattice; d in {1, 2, 3}, R >= 1."""

    d: int
    R: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise LatticeError(f"dimension must be 1, 2 or 3, got {self.d}")
        if not (isinstance(self.R, int) and self.R >= 1):
            raise LatticeError(f"range must be a positive integer, got {self.R}")

    @property
    def n_neighbors(self) -> int:
        """Neighbourhood size (2R+1)^d - 1."""
        return (2 * self.R + 1) ** self.d - 1

    @property
    def scale_power(self) -> int:
        """R^(d-1), the generation scale used by near-critical parameterizations."""
        return self.R ** (self.d - 1)


class EdgeKey(NamedTuple):
    """Canonical undirected edge: lexicographically smaller endpoint + offset."""

    base: Site
    delta: tuple


@dataclass(frozen=True)
class Box:
    """Closed box [-w, w]^d centred at the origin, in R-scaled units."""

    half_width: float

    def __post_init__(self):
        if self.half_width < 0:
            raise LatticeError("box half_width must be nonnegative")

    def contains(self, site: Site) -> bool:
        return all(abs(c) <= self.half_width for c in site)


@lru_cache(maxsize=None)
def _offsets(d: int, R: int) -> tuple:
    span = range(-R, R + 1)
    if d == 1:
        out = [(a,) for a in span]
    elif d == 2:
        out = [(a, b) for a in span for b in span]
    else:
        out = [(a, b, c) for a in span for b in span for c in span]
    return tuple(o for o in out if any(o))


def neighbor_offsets(params: LatticeParams) -> tuple:
    """All (2R+1)^d - 1 nonzero displacements with ||.||_inf <= R, lexicographic."""
    return _offsets(params.d, params.R)


def _check_coords(x: Site, d: int):
    if len(x) != d:
        raise LatticeError(f"site {x!r} does not have dimension {d}")
    for c in x:
        if abs(c) > COORD_LIMIT:
            raise LatticeError(f"coordinate {c} exceeds the +/-(2^31 - 1) guard")


def neighbors(x: Site, params: LatticeParams) -> list:
    """The n_neighbors distinct sites adjacent to x, in lexicographic delta order."""
    _check_coords(x, params.d)
    if any(abs(c) + params.R > COORD_LIMIT for c in x):
        raise LatticeError(f"neighbourhood of {x!r} would overflow the coordinate guard")
    return [tuple(c + o for c, o in zip(x, off)) for off in neighbor_offsets(params)]


def adjacent(x: Site, y: Site, params: LatticeParams) -> bool:
    if len(x) != len(y) or len(x) != params.d:
        return False
    diffs = [abs(a - b) for a, b in zip(x, y)]
    return 0 < max(diffs) <= params.R


def edge_key(x: Site, y: Site, params: LatticeParams) -> EdgeKey:
    """Canonical key for the undirected edge {x, y}; errors unless x ~ y."""
    _check_coords(x, params.d)
    _check_coords(y, params.d)
    if x == y:
        raise LatticeError("no self-edges: endpoints are equal")
    if not adjacent(x, y, params):
        raise LatticeError(f"{x!r} and {y!r} are not adjacent at range {params.R}")
    base, other = (x, y) if tuple(x) < tuple(y) else (y, x)
    delta = tuple(b - a for a, b in zip(base, other))
    return EdgeKey(tuple(base), delta)


def box_exits(trace: Iterable, box: Box) -> bool:
    """True iff any site in any set of the trace lies strictly outside the box."""
    for sites in trace:
        for s in sites:
            if not box.contains(s):
                return True
    return False


# ---------------------------------------------------------------------------
# Packed int64 keys


def _check_packable(coords: np.ndarray):
    if coords.size and np.abs(coords).max() > PACK_COORD_LIMIT:
        raise LatticeError(
            f"coordinate exceeds packed-key range +/-{PACK_COORD_LIMIT}"
        )


def pack_coords(coords: np.ndarray, d: int) -> np.ndarray:
    """Pack an (N, d) int array of coordinates into (N,) int64 keys."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, d)
    _check_packable(coords)
    keys = np.zeros(len(coords), dtype=np.int64)
    for axis in range(d):
        keys = (keys << PACK_FIELD_BITS) | (coords[:, axis] + PACK_OFFSET)
    return keys


def unpack_keys(keys: np.ndarray, d: int) -> np.ndarray:
    """Inverse of pack_coords: (N,) int64 keys -> (N, d) int64 coordinates."""
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((keys.size, d), dtype=np.int64)
    mask = np.int64((1 << PACK_FIELD_BITS) - 1)
    for axis in range(d - 1, -1, -1):
        out[:, axis] = (keys & mask) - PACK_OFFSET
        keys = keys >> PACK_FIELD_BITS
    return out


def pack_site(x: Site) -> int:
    return int(pack_coords(np.asarray([x]), len(x))[0])


def unpack_site(key: int, d: int) -> Site:
    return tuple(int(c) for c in unpack_keys(np.asarray([key]), d)[0])


@lru_cache(maxsize=None)
def _delta_keys(d: int, R: int) -> np.ndarray:
    offs = np.asarray(_offsets(d, R), dtype=np.int64)
    place = np.asarray(
        [1 << (PACK_FIELD_BITS * (d - 1 - i)) for i in range(d)], dtype=np.int64
    )
    keys = offs @ place
    keys.setflags(write=False)
    return keys


def delta_keys(params: LatticeParams) -> np.ndarray:
    """Packed key increments of the neighbour displacements, lexicographic order."""
    return _delta_keys(params.d, params.R)


def max_linf(keys: np.ndarray, d: int) -> int:
    """Largest ||site||_inf over an array of packed keys (0 for empty input)."""
    if np.asarray(keys).size == 0:
        return 0
    return int(np.abs(unpack_keys(keys, d)).max())
