"""Branching random walk envelope, domination coupling, and walk bounds.

The envelope process starts from one particle at the origin; each particle
independently has Binomial(V, p) children placed at that many *distinct*
uniformly chosen neighbour displacements, and dies.  Run on shared
randomness with the epidemic (one designated representative particle per
infected site contributes its offspring outcomes as the site's infection
attempts), the envelope dominates the epidemic pointwise: at every site
the number of envelope particles is at least the infection indicator.
Suppressed infections (attempts onto non-susceptible sites) still produce
envelope children, which is exactly where the slack comes from.

Also here: the single-step walk law of the envelope's displacements, the
exact k-step axis distribution used as a test oracle, box-exit tallies
with the martingale tail bound attached, and the cumulative-range tail
table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bonds import TAG_BRW, TAG_COUPLED, TAG_WALK, StreamRng
from .epidemic import _merge_sorted, _sorted_member_mask
from .lattice import (
    PACK_FIELD_BITS,
    PACK_OFFSET,
    LatticeParams,
    delta_keys,
    max_linf,
    neighbor_offsets,
    pack_coords,
    pack_site,
    unpack_keys,
)

_CHUNK_ENTRIES = 1 << 21


def _check_offspring_prob(params: LatticeParams, p: float):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"offspring probability must be in [0, 1], got {p}")
    if p * params.n_neighbors < 1.0:
        raise ValueError(
            "mean offspring number p*V must be >= 1 "
            f"(got {p * params.n_neighbors:.4f})"
        )


@dataclass
class BrwPopulation:
    """Occupation counts of one generation: sorted site keys and multiplicities."""

    keys: np.ndarray
    counts: np.ndarray
    n: int = 0

    @classmethod
    def single_origin(cls, params: LatticeParams) -> "BrwPopulation":
        key = pack_site((0,) * params.d)
        return cls(
            keys=np.asarray([key], dtype=np.int64),
            counts=np.asarray([1], dtype=np.int64),
            n=0,
        )

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def count_at(self, site) -> int:
        key = pack_site(tuple(site))
        i = np.searchsorted(self.keys, key)
        if i < self.keys.size and self.keys[i] == key:
            return int(self.counts[i])
        return 0


def _distinct_children(
    gen: np.random.Generator,
    parents: np.ndarray,
    m: np.ndarray,
    dkeys: np.ndarray,
    payload: Optional[np.ndarray] = None,
):
    """Children of each parent at m[i] distinct displacements.

    Distinctness per family via rejection on with-replacement draws
    (cheap when m << V), falling back to a random-permutation prefix when
    m is a large fraction of V.  Returns (child_keys, child_payload).
    """
    V = dkeys.size
    key_parts = []
    pay_parts = []
    for mval in np.unique(m):
        mval = int(mval)
        if mval == 0:
            continue
        if mval > V:
            raise AssertionError("offspring count exceeded neighbourhood size")
        sel = np.nonzero(m == mval)[0]
        g = sel.size
        if 2 * mval > V or V <= 8:
            u = gen.random((g, V))
            draws = np.argsort(u, axis=1)[:, :mval]
        else:
            draws = gen.integers(0, V, size=(g, mval))
            while True:
                srt = np.sort(draws, axis=1)
                bad = (np.diff(srt, axis=1) == 0).any(axis=1)
                n_bad = int(bad.sum())
                if n_bad == 0:
                    break
                draws[bad] = gen.integers(0, V, size=(n_bad, mval))
        children = parents[sel][:, None] + dkeys[draws]
        key_parts.append(children.ravel())
        if payload is not None:
            pay_parts.append(np.repeat(payload[sel], mval))
    if not key_parts:
        empty = np.empty(0, dtype=np.int64)
        return empty, (np.empty(0, dtype=payload.dtype) if payload is not None else None)
    keys = np.concatenate(key_parts)
    pays = np.concatenate(pay_parts) if payload is not None else None
    return keys, pays


def brw_step(
    pop: BrwPopulation, stream: StreamRng, params: LatticeParams, p: float
) -> BrwPopulation:
    """One envelope generation: every particle branches, parents die."""
    _check_offspring_prob(params, p)
    if pop.total == 0:
        return BrwPopulation(pop.keys[:0], pop.counts[:0], pop.n + 1)
    parents = np.repeat(pop.keys, pop.counts)
    m = stream.binomial(params.n_neighbors, p, parents.size)
    children, _ = _distinct_children(stream.generator, parents, m, delta_keys(params))
    keys, counts = np.unique(children, return_counts=True)
    return BrwPopulation(keys=keys, counts=counts.astype(np.int64), n=pop.n + 1)


# ---------------------------------------------------------------------------
# Coupled epidemic + envelope


@dataclass
class CoupledState:
    """Joint configuration carrying the pointwise domination invariant."""

    eta_keys: np.ndarray  # sorted keys of infected sites
    blocked_keys: np.ndarray  # infected + recovered, sorted
    pop: BrwPopulation
    n: int = 0

    def domination_holds(self) -> bool:
        """Every infected site hosts at least one envelope particle."""
        if self.eta_keys.size == 0:
            return True
        present = _sorted_member_mask(self.pop.keys, self.eta_keys)
        return bool(np.all(present))


def initial_coupled_state(params: LatticeParams) -> CoupledState:
    key = pack_site((0,) * params.d)
    eta = np.asarray([key], dtype=np.int64)
    return CoupledState(
        eta_keys=eta,
        blocked_keys=eta.copy(),
        pop=BrwPopulation.single_origin(params),
        n=0,
    )


def coupled_step(
    cs: CoupledState, stream: StreamRng, params: LatticeParams, p: float
) -> CoupledState:
    """One synchronized generation of (epidemic, envelope) on shared draws.

    For each infected site one envelope particle is designated the
    representative; its per-displacement Bernoulli outcomes are shared:
    they are simultaneously the representative's offspring and the site's
    infection attempts.  Remaining particles branch independently.
    Raises AssertionError if the domination invariant ever fails (a bug,
    not model behaviour).
    """
    _check_offspring_prob(params, p)
    if not cs.domination_holds():
        raise AssertionError("domination invariant violated on entry")
    dkeys = delta_keys(params)
    V = dkeys.size
    gen = stream.generator

    # representatives: shared Bernoulli field, one row per infected site
    child_parts = []
    open_parts = []
    rows = max(1, _CHUNK_ENTRIES // V)
    for lo in range(0, cs.eta_keys.size, rows):
        block = cs.eta_keys[lo : lo + rows]
        fire = gen.random((block.size, V)) < p
        targets = block[:, None] + dkeys[None, :]
        born = targets[fire]
        child_parts.append(born)
        open_parts.append(born)
    rep_children = (
        np.concatenate(child_parts) if child_parts else np.empty(0, dtype=np.int64)
    )
    attempts = (
        np.concatenate(open_parts) if open_parts else np.empty(0, dtype=np.int64)
    )

    # epidemic: successful attempts onto susceptible sites
    fresh = ~_sorted_member_mask(cs.blocked_keys, attempts)
    eta_next = np.unique(attempts[fresh])

    # bystander envelope particles branch independently
    counts_rest = cs.pop.counts.copy()
    if cs.eta_keys.size:
        idx = np.searchsorted(cs.pop.keys, cs.eta_keys)
        counts_rest[idx] -= 1
    parents_rest = np.repeat(cs.pop.keys, counts_rest)
    if parents_rest.size:
        m = stream.binomial(V, p, parents_rest.size)
        rest_children, _ = _distinct_children(gen, parents_rest, m, dkeys)
    else:
        rest_children = np.empty(0, dtype=np.int64)

    all_children = np.concatenate([rep_children, rest_children])
    keys, counts = np.unique(all_children, return_counts=True)
    pop_next = BrwPopulation(keys=keys, counts=counts.astype(np.int64), n=cs.n + 1)

    out = CoupledState(
        eta_keys=eta_next,
        blocked_keys=_merge_sorted(cs.blocked_keys, eta_next),
        pop=pop_next,
        n=cs.n + 1,
    )
    if not out.domination_holds():
        raise AssertionError("domination invariant violated after stepping")
    return out


@dataclass
class CoupledTrialResult:
    gens: int
    eta_sizes: list
    z_totals: list
    capped: bool
    eta_extinct: bool
    eta_visited: np.ndarray
    z_visited: np.ndarray


def run_coupled_trial(
    master_seed: int,
    trial_index: int,
    params: LatticeParams,
    p: float,
    horizon: int,
    particle_cap: int = 20_000,
) -> CoupledTrialResult:
    """Coupled trial from a single origin, stopping at the horizon, epidemic
    extinction, or the envelope particle cap (whichever first)."""
    stream = StreamRng(master_seed, trial_index, TAG_COUPLED)
    cs = initial_coupled_state(params)
    eta_sizes = [int(cs.eta_keys.size)]
    z_totals = [cs.pop.total]
    eta_visited = cs.eta_keys.copy()
    z_visited = cs.pop.keys.copy()
    capped = False
    while cs.n < horizon:
        if cs.eta_keys.size == 0:
            break
        if cs.pop.total > particle_cap:
            capped = True
            break
        cs = coupled_step(cs, stream, params, p)
        eta_sizes.append(int(cs.eta_keys.size))
        z_totals.append(cs.pop.total)
        eta_visited = _merge_sorted(eta_visited, cs.eta_keys)
        z_visited = np.union1d(z_visited, cs.pop.keys)
    return CoupledTrialResult(
        gens=cs.n,
        eta_sizes=eta_sizes,
        z_totals=z_totals,
        capped=capped,
        eta_extinct=cs.eta_keys.size == 0,
        eta_visited=np.unique(eta_visited),
        z_visited=z_visited,
    )


# ---------------------------------------------------------------------------
# Batched envelope runs (independent trials tagged by id)


@dataclass
class BrwBatchResult:
    totals: np.ndarray  # (trials, gens+1) population size per generation
    halfspace: Optional[np.ndarray]  # same shape; particles with first axis > 0
    range_max: Optional[np.ndarray]  # (trials,) max ||site||_inf over gens >= 1
    guard_hit: bool


def brw_batch(
    n_trials: int,
    n_gens: int,
    params: LatticeParams,
    p: float,
    master_seed: int,
    track_halfspace: bool = False,
    track_range: bool = False,
    particle_guard: int = 50_000_000,
) -> BrwBatchResult:
    """Run independent envelope trials simultaneously, tagged by trial id.

    All trials draw from one stream keyed by the master seed; the result
    is a deterministic function of (master_seed, arguments).  The guard
    aborts pathological blow-ups rather than silently truncating.
    """
    _check_offspring_prob(params, p)
    stream = StreamRng(master_seed, 0, TAG_BRW)
    d = params.d
    V = params.n_neighbors
    dkeys = delta_keys(params)
    origin = pack_site((0,) * d)

    keys = np.full(n_trials, origin, dtype=np.int64)
    ids = np.arange(n_trials, dtype=np.int64)
    totals = np.zeros((n_trials, n_gens + 1), dtype=np.int64)
    totals[:, 0] = 1
    half = np.zeros((n_trials, n_gens + 1), dtype=np.int64) if track_halfspace else None
    shift = PACK_FIELD_BITS * (d - 1)
    if track_halfspace and half is not None:
        half[:, 0] = 0  # origin has first axis 0
    range_max = np.full(n_trials, -1, dtype=np.int64) if track_range else None

    for gen_i in range(1, n_gens + 1):
        if keys.size == 0:
            break
        m = stream.binomial(V, p, keys.size)
        keys, ids = _distinct_children(stream.generator, keys, m, dkeys, payload=ids)
        if keys.size > particle_guard:
            return BrwBatchResult(totals, half, range_max, guard_hit=True)
        if keys.size == 0:
            break
        totals[:, gen_i] = np.bincount(ids, minlength=n_trials)
        if track_halfspace:
            axis0 = (keys >> shift) - PACK_OFFSET
            half[:, gen_i] = np.bincount(
                ids, weights=(axis0 > 0).astype(np.float64), minlength=n_trials
            ).astype(np.int64)
        if track_range:
            linf = np.abs(unpack_keys(keys, d)).max(axis=1)
            np.maximum.at(range_max, ids, linf)
    return BrwBatchResult(totals, half, range_max, guard_hit=False)


def walk_axis_distribution(params: LatticeParams, k: int):
    """Exact distribution of one coordinate of the k-step uniform-neighbour walk.

    Returns (values, probabilities) with values = -kR..kR.  Single-step
    marginal: every axis value a in [-R, R] has weight (2R+1)^(d-1),
    minus one at a = 0 for the excluded zero displacement.
    """
    R, d = params.R, params.d
    V = params.n_neighbors
    w = np.full(2 * R + 1, (2 * R + 1) ** (d - 1), dtype=np.float64)
    w[R] -= 1.0  # a = 0
    pmf = w / V
    out = np.asarray([1.0])
    for _ in range(k):
        out = np.convolve(out, pmf)
    values = np.arange(-k * R, k * R + 1)
    return values, out


def walk_halfspace_prob(params: LatticeParams, k: int) -> float:
    """Exact P(first coordinate of the k-step walk > 0)."""
    values, probs = walk_axis_distribution(params, k)
    return float(probs[values > 0].sum())


# ---------------------------------------------------------------------------
# Box-exit tallies with the martingale tail bound


@dataclass
class WalkExitRow:
    k: int
    trials: int
    hits_running: int  # exited by step k (first-passage)
    hits_at_k: int  # outside at exactly step k
    p_hat: float  # running-exit estimate
    bound: float


@dataclass
class WalkExitReport:
    n: int
    K: float
    threshold_sites: float  # K*sqrt(n)*R in R-scaled units
    bound: float
    vacuous: bool
    rows: list


def walk_box_exit(
    params: LatticeParams, n: int, K: float, trials: int, master_seed: int
) -> WalkExitReport:
    """Empirical exit probabilities of the uniform-neighbour walk from the
    box of half-width K*sqrt(n) (in range units), per step k <= n, with the
    sub-Gaussian martingale bound 2d*exp(-K^2/2) attached."""
    if K <= 0 or n < 1:
        raise ValueError("need K > 0 and n >= 1")
    stream = StreamRng(master_seed, 0, TAG_WALK)
    d, R = params.d, params.R
    offsets = np.asarray(neighbor_offsets(params), dtype=np.int64)
    V = offsets.shape[0]
    thr = K * math.sqrt(n) * R
    bound = 2.0 * d * math.exp(-K * K / 2.0)

    pos = np.zeros((trials, d), dtype=np.int64)
    run_max = np.zeros(trials, dtype=np.int64)
    rows = []
    for k in range(1, n + 1):
        idx = stream.integers(V, size=trials)
        pos += offsets[idx]
        linf = np.abs(pos).max(axis=1)
        run_max = np.maximum(run_max, linf)
        rows.append(
            WalkExitRow(
                k=k,
                trials=trials,
                hits_running=int((run_max >= thr).sum()),
                hits_at_k=int((linf >= thr).sum()),
                p_hat=float((run_max >= thr).sum()) / trials,
                bound=bound,
            )
        )
    return WalkExitReport(
        n=n, K=K, threshold_sites=thr, bound=bound, vacuous=bound > 1.0, rows=rows
    )


# ---------------------------------------------------------------------------
# Cumulative-range tail table


@dataclass
class RangeTailRow:
    r: float  # box half-width in range units
    trials: int
    hits: int
    p_hat: float
    scaled: float  # (r+1)^2 * p_hat


@dataclass
class RangeTailReport:
    n: int
    theta: float
    c: float
    K: float
    rows: list
    guard_hit: bool


def range_tail(
    params: LatticeParams,
    theta: float,
    n: int,
    r_grid: Sequence,
    trials: int,
    master_seed: int,
    c: float = 8.0,
    K: float = 3.0,
    particle_guard: int = 50_000_000,
) -> RangeTailReport:
    """Empirical tail of the envelope's cumulative range.

    For each box half-width r (in range units, i.e. the unrescaled walk
    scale) reports the fraction of trials whose envelope occupies some
    site strictly outside [-r, r]^d within n generations, together with
    (r+1)^2 * p_hat for shape inspection.  Exits are computed from one
    per-trial maximum displacement, so they are exactly nested across r.
    Requires the near-critical regime n <= c*R^(d-1) and r <= K*sqrt(n).
    """
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    if n > c * params.scale_power:
        raise ValueError(f"n={n} outside the declared regime n <= c*R^(d-1)")
    r_grid = sorted(float(r) for r in r_grid)
    if any(r < 0 for r in r_grid):
        raise ValueError("box half-widths must be nonnegative")
    if any(r > K * math.sqrt(n) for r in r_grid):
        raise ValueError("grid exceeds the declared regime r <= K*sqrt(n)")
    p = (1.0 + theta / params.scale_power) / params.n_neighbors
    batch = brw_batch(
        trials,
        n,
        params,
        p,
        master_seed,
        track_range=True,
        particle_guard=particle_guard,
    )
    rows = []
    for r in r_grid:
        hits = int((batch.range_max > r * params.R).sum())
        p_hat = hits / trials
        rows.append(
            RangeTailRow(
                r=r, trials=trials, hits=hits, p_hat=p_hat, scaled=(r + 1) ** 2 * p_hat
            )
        )
    return RangeTailReport(
        n=n, theta=theta, c=c, K=K, rows=rows, guard_hit=batch.guard_hit
    )


def rw_step(site, stream: StreamRng, params: LatticeParams):
    """One uniform-neighbour walk step from a site."""
    offsets = neighbor_offsets(params)
    off = offsets[int(stream.integers(len(offsets)))]
    return tuple(c + o for c, o in zip(site, off))
