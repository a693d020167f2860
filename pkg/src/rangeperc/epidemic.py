"""Discrete-time SIR epidemic on the range-R lattice.

One unit of infectiousness, permanent recovery: at each generation every
infected-susceptible neighbour pair carries an infection attempt, and a
susceptible site joins the next infected set iff at least one attempt onto
it succeeds.  Attempts are decided by the shared lazy bond oracle
(``mode="bond-exact"``), which makes the epidemic and bond percolation two
views of one random object: the infected set at generation n equals the
distance-n shell of the origin's open cluster.  ``percolation_cluster``
explores that cluster by an independent breadth-first route so the
equivalence can be checked trial by trial.

``mode="aggregate-fast"`` replaces the per-edge queries by one draw per
frontier target with success probability 1 - (1-p)^(#infected neighbours),
which has the same law because each bond is examined at most once.

State internals are sorted packed-key numpy arrays (see lattice); the
public ``EpidemicState`` works with plain site tuples.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import lattice
from .bonds import TAG_EPIDEMIC, BondOracle, StreamRng, mix64, uniform01_keys, _u64
from .lattice import (
    PACK_COORD_LIMIT,
    PACK_FIELD_BITS,
    PACK_OFFSET,
    LatticeParams,
    LatticeError,
    Site,
    delta_keys,
    neighbor_offsets,
    pack_coords,
    unpack_keys,
)

_CHUNK_ENTRIES = 1 << 22  # candidate-key entries processed per block

MODE_BOND_EXACT = "bond-exact"
MODE_AGGREGATE = "aggregate-fast"
_MODES = (MODE_BOND_EXACT, MODE_AGGREGATE)


class FrontierEdge(NamedTuple):
    src: Site  # infected endpoint
    dst: Site  # susceptible endpoint


@dataclass(frozen=True)
class EpidemicState:
    """Infected / recovered configuration at one generation."""

    infected: frozenset
    recovered: frozenset
    gen: int = 0
    cumulative: int = 0

    @classmethod
    def from_seeds(cls, eta0, rho0=()) -> "EpidemicState":
        inf, rec = frozenset(eta0), frozenset(rho0)
        if inf & rec:
            raise ValueError("initial infected and recovered sets must be disjoint")
        return cls(infected=inf, recovered=rec, gen=0, cumulative=len(inf))

    def __post_init__(self):
        if self.infected & self.recovered:
            raise ValueError("infected and recovered sets must be disjoint")


@dataclass
class StopRule:
    """Finite-trial stopping: a trial ends at extinction, at the cumulative
    mass cap, at the generation cap, or on leaving the declared box.

    Survival (the finite surrogate for an infinite cluster) means reaching
    the mass cap: unbounded growth certified by bulk, which is monotone in
    the set of open bonds and therefore couples exactly across p.  The
    generation cap is a runtime guard; a trial merely still alive there is
    a transient, not a survivor.  gen_cap=None resolves to 10 * R^(d-1).
    box_half_width, when set, stops the trial once any infected site
    leaves the closed box (in R-scaled units)."""

    mass_cap: int = 50_000
    gen_cap: Optional[int] = None
    box_half_width: Optional[float] = None

    def resolved_gen_cap(self, params: LatticeParams) -> int:
        if self.gen_cap is not None:
            return self.gen_cap
        return 10 * params.scale_power


@dataclass
class TrialResult:
    sizes: list  # |infected| per generation, starting at generation 0
    cumulative: int
    extinct: bool
    mass_cap_hit: bool
    gen_cap_hit: bool
    box_exited: bool
    max_linf: int
    mode: str
    box_flags: list = field(default_factory=list)  # per-generation exit flag
    trace: Optional[list] = None  # per-generation sorted key arrays
    queried_edges: int = 0

    @property
    def gens(self) -> int:
        return len(self.sizes) - 1

    @property
    def survived(self) -> bool:
        """Mass cap reached: the monotone finite surrogate for survival."""
        return self.mass_cap_hit


def _sorted_member_mask(sorted_arr: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Boolean mask: values[i] present in sorted_arr."""
    if sorted_arr.size == 0 or values.size == 0:
        return np.zeros(values.size, dtype=bool)
    idx = np.searchsorted(sorted_arr, values)
    idx = np.minimum(idx, sorted_arr.size - 1)
    return sorted_arr[idx] == values


def _merge_sorted(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if b.size == 0:
        return a
    if a.size == 0:
        return b
    return np.sort(np.concatenate([a, b]), kind="stable")


def _advance(
    eta: np.ndarray,
    blocked: np.ndarray,
    dkeys: np.ndarray,
    oracle: BondOracle,
    mode: str,
    stream: Optional[StreamRng],
    audit: Optional[list] = None,
) -> tuple:
    """One generation on packed-key arrays; returns (new_eta, n_queried).

    Bond-exact thresholds the edge uniforms before the susceptibility
    filter: the uniforms are pure functions of the edges, so the order of
    the two filters cannot change the result, and at small p it leaves
    only ~p*|frontier| candidates for the sorted-membership test.  The
    audit path filters first so it can count exactly the frontier edges
    the dynamics consume.
    """
    V = dkeys.size
    rows = max(1, _CHUNK_ENTRIES // V)
    pieces = []
    queried = 0
    for lo in range(0, eta.size, rows):
        block = eta[lo : lo + rows]
        tgt2 = block[:, None] + dkeys[None, :]
        if mode == MODE_BOND_EXACT:
            if audit is not None:
                cand = tgt2.ravel()
                fresh = ~_sorted_member_mask(blocked, cand)
                tgt = cand[fresh]
                src = np.repeat(block, V)[fresh]
                kmin = np.minimum(src, tgt)
                kmax = np.maximum(src, tgt)
                queried += kmin.size
                audit.append(np.column_stack([kmin, kmax]))
                u = uniform01_keys(oracle, kmin, kmax)
                pieces.append(tgt[u < oracle.p])
            else:
                kmin2 = np.minimum(block[:, None], tgt2)
                kmax2 = np.maximum(block[:, None], tgt2)
                u2 = uniform01_keys(oracle, kmin2, kmax2)
                tgt_open = tgt2[u2 < oracle.p]
                fresh = ~_sorted_member_mask(blocked, tgt_open)
                pieces.append(tgt_open[fresh])
        else:
            cand = tgt2.ravel()
            fresh = ~_sorted_member_mask(blocked, cand)
            pieces.append(cand[fresh])
    if not pieces:
        return np.empty(0, dtype=np.int64), 0
    tgt_all = np.concatenate(pieces)
    if mode == MODE_BOND_EXACT:
        return np.unique(tgt_all), queried
    uniq, counts = np.unique(tgt_all, return_counts=True)
    if uniq.size == 0:
        return uniq, 0
    with np.errstate(divide="ignore", invalid="ignore"):
        hit_prob = -np.expm1(counts * np.log1p(-oracle.p))
    if oracle.p >= 1.0:
        hit_prob = np.ones_like(hit_prob)
    u = stream.uniform(uniq.size)
    return uniq[u < hit_prob], int(counts.sum())


def _pack_sites(sites, d: int) -> np.ndarray:
    if not sites:
        return np.empty(0, dtype=np.int64)
    arr = np.asarray(sorted(tuple(s) for s in sites), dtype=np.int64)
    return np.sort(pack_coords(arr, d))


def _unpack_to_set(keys: np.ndarray, d: int) -> frozenset:
    return frozenset(map(tuple, unpack_keys(keys, d).tolist()))


def frontier(state: EpidemicState, params: LatticeParams) -> list:
    """All infected-to-susceptible edges, infected endpoint first."""
    blocked = state.infected | state.recovered
    out = []
    for x in sorted(state.infected):
        for y in lattice.neighbors(x, params):
            if y not in blocked:
                out.append(FrontierEdge(x, y))
    return out


def _make_stream(oracle: BondOracle) -> StreamRng:
    return StreamRng(oracle.master_seed, oracle.trial_index, TAG_EPIDEMIC)


def step(
    state: EpidemicState,
    oracle: BondOracle,
    params: LatticeParams,
    mode: str = MODE_BOND_EXACT,
    stream: Optional[StreamRng] = None,
) -> EpidemicState:
    """One SIR generation; pure given (state, oracle) in bond-exact mode."""
    if mode not in _MODES:
        raise ValueError(f"unknown stepping mode {mode!r}")
    eta = _pack_sites(state.infected, params.d)
    blocked = _pack_sites(state.infected | state.recovered, params.d)
    if mode == MODE_AGGREGATE and stream is None:
        stream = _make_stream(oracle)
    new, _ = _advance(eta, blocked, delta_keys(params), oracle, mode, stream)
    infected = _unpack_to_set(new, params.d)
    return EpidemicState(
        infected=infected,
        recovered=state.recovered | state.infected,
        gen=state.gen + 1,
        cumulative=state.cumulative + len(infected),
    )


def run_trial(
    eta0,
    rho0,
    oracle: BondOracle,
    params: LatticeParams,
    stop: StopRule,
    mode: str = MODE_BOND_EXACT,
    record_trace: bool = False,
    audit: bool = False,
) -> TrialResult:
    """Run one epidemic until extinction or the stop rule fires."""
    if mode not in _MODES:
        raise ValueError(f"unknown stepping mode {mode!r}")
    eta0 = frozenset(eta0)
    rho0 = frozenset(rho0)
    if eta0 & rho0:
        raise ValueError("eta0 and rho0 must be disjoint")
    d = params.d
    eta = _pack_sites(eta0, d)
    blocked = _merge_sorted(eta, _pack_sites(rho0, d))
    dkeys = delta_keys(params)
    stream = _make_stream(oracle) if mode == MODE_AGGREGATE else None
    gen_cap = stop.resolved_gen_cap(params)
    box_w = stop.box_half_width

    audit_pairs: Optional[list] = [] if audit else None
    trace = [eta.copy()] if record_trace else None
    sizes = [int(eta.size)]
    cumulative = int(eta.size)
    max_linf = lattice.max_linf(eta, d)
    exited = box_w is not None and max_linf > box_w
    box_flags = [exited]
    gen = 0
    extinct = False
    gen_cap_hit = False
    queried = 0

    while True:
        if eta.size == 0:
            extinct = True
            break
        if cumulative >= stop.mass_cap:
            break
        if gen >= gen_cap:
            gen_cap_hit = True
            break
        if box_w is not None and exited:
            break
        eta, nq = _advance(eta, blocked, dkeys, oracle, mode, stream, audit_pairs)
        queried += nq
        gen += 1
        sizes.append(int(eta.size))
        cumulative += int(eta.size)
        blocked = _merge_sorted(blocked, eta)
        if eta.size:
            max_linf = max(max_linf, lattice.max_linf(eta, d))
        if box_w is not None:
            exited = exited or max_linf > box_w
        box_flags.append(exited)
        if record_trace:
            trace.append(eta.copy())

    if audit:
        pairs = (
            np.concatenate(audit_pairs)
            if audit_pairs
            else np.empty((0, 2), dtype=np.int64)
        )
        if pairs.size and np.unique(pairs, axis=0).shape[0] != pairs.shape[0]:
            raise AssertionError("a bond variable was queried more than once")

    return TrialResult(
        sizes=sizes,
        cumulative=cumulative,
        extinct=extinct,
        mass_cap_hit=cumulative >= stop.mass_cap,
        gen_cap_hit=gen_cap_hit,
        box_exited=bool(exited) if box_w is not None else False,
        max_linf=max_linf,
        mode=mode,
        box_flags=box_flags,
        trace=trace,
        queried_edges=queried,
    )


def infection_times(trace: list, params: LatticeParams) -> dict:
    """Map packed site key -> generation of first infection, from a trial trace."""
    tau = {}
    for n, keys in enumerate(trace):
        for k in keys.tolist():
            tau.setdefault(k, n)
    return tau


# ---------------------------------------------------------------------------
# Independent cluster exploration (dual route to the epidemic)


@dataclass
class ClusterResult:
    labels: dict  # site -> graph distance from the origin
    truncated: bool
    complete_layers: int

    def shell(self, n: int) -> frozenset:
        return frozenset(s for s, lab in self.labels.items() if lab == n)


def _pack_int(x, d: int) -> int:
    key = 0
    for c in x:
        if abs(c) > PACK_COORD_LIMIT:
            raise LatticeError(f"coordinate {c} exceeds packed-key range")
        key = (key << PACK_FIELD_BITS) | (c + PACK_OFFSET)
    return key


_MASK64 = (1 << 64) - 1
_PM1 = 0xBF58476D1CE4E5B9
_PM2 = 0x94D049BB133111EB


def _mix_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * _PM1) & _MASK64
    z = ((z ^ (z >> 27)) * _PM2) & _MASK64
    return z ^ (z >> 31)


def percolation_cluster(
    origin: Site, oracle: BondOracle, params: LatticeParams, cap: int
) -> ClusterResult:
    """Breadth-first exploration of open bonds from the origin.

    Pure-Python layered BFS, deliberately independent of the array engine;
    shares only the bond randomness.  The label of a site is its graph
    distance from the origin in the open subgraph.  Exploration stops
    before expanding a layer once `cap` sites are labeled.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    d = params.d
    offsets = neighbor_offsets(params)
    base = int(mix64(mix64(_u64(oracle.master_seed)) ^ _u64(oracle.trial_index)))
    p = oracle.p

    origin = tuple(origin)
    labels = {origin: 0}
    layer = deque([origin])
    n = 0
    count = 1
    truncated = False
    while layer:
        if count >= cap:
            truncated = True
            break
        nxt = []
        for x in layer:
            kx = _pack_int(x, d)
            for off in offsets:
                y = tuple(c + o for c, o in zip(x, off))
                if y in labels:
                    continue
                ky = _pack_int(y, d)
                ka, kb = (kx, ky) if kx < ky else (ky, kx)
                h = _mix_int(_mix_int(base ^ ka) ^ kb)
                if (h >> 11) * 2.0**-53 < p:
                    labels[y] = n + 1
                    nxt.append(y)
                    count += 1
        n += 1
        layer = deque(sorted(nxt))
    # at a cap break, layer n is fully labeled; on natural exhaustion the
    # last nonempty layer was n-1
    complete = n if truncated else max(n - 1, 0)
    return ClusterResult(labels=labels, truncated=truncated, complete_layers=complete)


# ---------------------------------------------------------------------------
# Conditional-increment identity and pathwise couplings


def expected_increment(
    state: EpidemicState, theta: float, params: LatticeParams
) -> float:
    """Closed-form conditional mean of the one-generation infection increment.

    Valid when the oracle's p corresponds to mean contact number
    1 + theta / R^(d-1); the negative part is the interference from
    attempts onto already infected or recovered sites.  The formula counts
    successful attempts: when two infectors hit one susceptible site in
    the same generation the set increment is smaller, an overlap of order
    p^2 per such site, vanishing in the near-critical regime (p = O(1/V)).
    """
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    eps = theta / params.scale_power
    blocked = state.infected | state.recovered
    interference = 0
    for x in state.infected:
        interference += sum(1 for y in lattice.neighbors(x, params) if y in blocked)
    V = params.n_neighbors
    return eps * len(state.infected) - (1.0 + eps) * interference / V


def cumulative_sets(trace: list) -> list:
    """Per-generation cumulative infected key arrays from a trial trace."""
    out = []
    acc = np.empty(0, dtype=np.int64)
    for keys in trace:
        acc = _merge_sorted(acc, keys)
        out.append(acc)
    return out


def monotone_coupling_check(
    eta0,
    rho0,
    oracle: BondOracle,
    params: LatticeParams,
    horizon: int,
    mass_guard: int = 1_000_000,
) -> bool:
    """Pathwise containment of the blocked epidemic in the unblocked one.

    Runs the same bond randomness once with recovered seed rho0 and once
    with no recovered seed; true iff for every generation up to the
    horizon the cumulative infected set of the blocked run is a subset of
    the unblocked run's.
    """
    stop = StopRule(mass_cap=mass_guard, gen_cap=horizon)
    blocked_run = run_trial(
        eta0, rho0, oracle, params, stop, MODE_BOND_EXACT, record_trace=True
    )
    free_run = run_trial(
        eta0, (), oracle, params, stop, MODE_BOND_EXACT, record_trace=True
    )
    if blocked_run.mass_cap_hit or free_run.mass_cap_hit:
        raise RuntimeError("mass_guard reached before the horizon; raise mass_guard")
    cb = cumulative_sets(blocked_run.trace)
    cf = cumulative_sets(free_run.trace)
    for n in range(len(cb)):
        b = cb[n]
        f = cf[min(n, len(cf) - 1)]
        if not bool(np.all(_sorted_member_mask(f, b))):
            return False
    return True
