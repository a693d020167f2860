"""Deterministic lazy bond randomness and per-trial random streams.

Bond variables are never stored.  Each query avalanche-hashes the packed
tuple (master_seed, trial_index, edge) with the splitmix64 finalizer, so
the full set of bonds of a trial occupies O(1) memory, replays exactly,
and is identical no matter which order the simulation touches edges in.

Hash layout (fixed; replays are portable across platforms):

  k0 = mix64(master_seed)              all quantities are uint64, wrap mod 2^64
  k1 = mix64(k0 xor trial_index)
  h  = mix64(mix64(k1 xor kmin) xor kmax)
  u  = (h >> 11) * 2^-53               53-bit uniform in [0, 1)

where mix64 is the splitmix64 finalizer

  z ^= z >> 30;  z *= 0xbf58476d1ce4e5b9
  z ^= z >> 27;  z *= 0x94d049bb133111eb
  z ^= z >> 31

and (kmin, kmax) are the packed int64 site keys of the edge's endpoints
in increasing order (see lattice.pack_coords for the byte layout of a
key: 21-bit fields, coordinate + 2^20 per axis, axis 0 most significant).
The uniform is the primitive; a bond is open iff u < p, which couples the
open sets monotonically across p for a fixed (seed, trial).

Auxiliary draws (offspring counts, aggregate-mode infections, walks) come
from StreamRng: a numpy Generator over the counter-based Philox engine,
keyed by hashing (master_seed, trial_index, stream_tag).  Distinct keys
give statistically independent streams; a stream is single-owner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeParams, Site, adjacent, pack_site

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_U53 = 2.0**-53
_MASK64 = (1 << 64) - 1

# Stream tags (single registry so streams never collide across purposes).
TAG_EPIDEMIC = 1
TAG_BRW = 2
TAG_COUPLED = 3
TAG_WALK = 4
TAG_GW = 5


def mix64(z):
    """splitmix64 finalizer; accepts uint64 scalars or arrays, wraps mod 2^64."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
        return z ^ (z >> _S31)


def _u64(value: int) -> np.uint64:
    return np.uint64(int(value) & _MASK64)


def derive_seed(*parts: int) -> int:
    """Fold integers into a derived 64-bit seed by chained avalanche mixing."""
    h = mix64(_u64(0x243F6A8885A308D3))  # pi fractional bits, fixed salt
    for p in parts:
        h = mix64(h ^ _u64(p))
    return int(h)


@dataclass(frozen=True)
class BondOracle:
    """Pure map (master_seed, trial_index, edge) -> Bernoulli(p) bond."""

    master_seed: int
    trial_index: int
    p: float
    _base: np.uint64 = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"bond probability must be in [0, 1], got {self.p}")
        base = mix64(mix64(_u64(self.master_seed)) ^ _u64(self.trial_index))
        object.__setattr__(self, "_base", base)

    def with_p(self, p: float) -> "BondOracle":
        """Same underlying uniforms, different threshold (monotone coupling)."""
        return BondOracle(self.master_seed, self.trial_index, p)


def uniform01_keys(oracle: BondOracle, kmin, kmax):
    """Uniform [0,1) of the edge(s) given packed endpoint keys, kmin <= kmax.

    Accepts scalars or broadcastable int64/uint64 arrays; vectorized.
    """
    kmin_u = np.asarray(kmin, dtype=np.int64).view(np.uint64) if np.ndim(kmin) else _u64(int(kmin))
    kmax_u = np.asarray(kmax, dtype=np.int64).view(np.uint64) if np.ndim(kmax) else _u64(int(kmax))
    h = mix64(mix64(oracle._base ^ kmin_u) ^ kmax_u)
    if np.ndim(h):
        return (h >> _S11).astype(np.float64) * _U53
    return float(h >> _S11) * _U53


def uniform01(oracle: BondOracle, x: Site, y: Site, params: LatticeParams) -> float:
    """Uniform [0,1) of the undirected edge {x, y}; symmetric in the endpoints."""
    if x == y or not adjacent(x, y, params):
        raise ValueError(f"{x!r} and {y!r} do not form an edge at range {params.R}")
    ka, kb = pack_site(x), pack_site(y)
    return uniform01_keys(oracle, min(ka, kb), max(ka, kb))


def bond(oracle: BondOracle, x: Site, y: Site, params: LatticeParams) -> bool:
    """True iff the edge {x, y} is open (uniform < p)."""
    return uniform01(oracle, x, y, params) < oracle.p


def uniform01_trials(master_seed: int, trial_indices, kmin, kmax):
    """Uniforms for broadcastable (trial, edge) combinations.

    Used by conditional-replay experiments that redraw one generation many
    times: trial_indices and the key arrays broadcast against each other.
    """
    t = np.asarray(trial_indices, dtype=np.int64).view(np.uint64)
    base = mix64(mix64(_u64(master_seed)) ^ t)
    kmin_u = np.asarray(kmin, dtype=np.int64).view(np.uint64)
    kmax_u = np.asarray(kmax, dtype=np.int64).view(np.uint64)
    h = mix64(mix64(base ^ kmin_u) ^ kmax_u)
    return (h >> _S11).astype(np.float64) * _U53


class StreamRng:
    """Counter-based random stream for one (trial, purpose) pair.

    Thin wrapper over numpy's Philox engine keyed from
    (master_seed, trial_index, stream_tag) by avalanche mixing.  Exposes
    the underlying Generator for draws that need exact discrete sampling
    (binomial counts, subset choice); single-owner, not thread-safe.
    """

    def __init__(self, master_seed: int, trial_index: int, stream_tag: int):
        self.master_seed = int(master_seed)
        self.trial_index = int(trial_index)
        self.stream_tag = int(stream_tag)
        k0 = derive_seed(master_seed, trial_index, stream_tag)
        k1 = derive_seed(k0, 0x9E3779B97F4A7C15)
        key = np.array([k0, k1], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def uniform(self, size=None):
        return self.generator.random(size)

    def integers(self, high: int, size=None):
        return self.generator.integers(0, high, size=size)

    def binomial(self, n, p, size=None):
        return self.generator.binomial(n, p, size)
