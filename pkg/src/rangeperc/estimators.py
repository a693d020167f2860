"""Critical-point estimation and statistical diagnostics.

Survival of a trial is the declared finite-size surrogate from
epidemic.StopRule (cumulative mass reaches the cap, or still alive at the
generation cap).  The critical contact mean is bracketed by stochastic
bisection: each midpoint is classified supercritical or subcritical by
comparing the Wilson interval of the survival fraction against a floor,
escalating the trial count while the interval straddles the floor.  All
midpoints reuse the same per-trial bond uniforms, so in bond-exact mode
with a mass-cap-dominated stop rule the per-trial survival indicator is
monotone along the bisection path by the shared-threshold coupling.

Estimates are deterministic functions of (master_seed, configuration) at
any worker count: trials are keyed by index, never by scheduling.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtri

from . import epidemic, lattice
from .bonds import BondOracle, derive_seed
from .epidemic import MODE_BOND_EXACT, StopRule, run_trial
from .lattice import LatticeParams


class EstimationError(RuntimeError):
    """Bracket misclassification or other unrecoverable estimator failure."""


def default_stop(params: LatticeParams) -> StopRule:
    """Estimator stop rule: mass cap 5e4 with a generous generation guard.

    The guard must leave the mass cap reachable for near-critical trials:
    supercritical spatial growth is ballistic, bounded by the lattice ball
    (2*n*R+1)^d, so 10*R^(d-1) generations cannot accumulate 5e4 sites at
    small R in d=2.  100*R^(d-1) restores reachability; dying trials stop
    on their own clock, so the looser guard costs little.
    """
    return StopRule(mass_cap=50_000, gen_cap=100 * params.scale_power)


def wilson_interval(successes: int, trials: int, confidence: float = 0.95):
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        return 0.0, 1.0
    if not 0 <= successes <= trials:
        raise ValueError("successes must lie in [0, trials]")
    z = float(ndtri(0.5 + confidence / 2.0))
    p_hat = successes / trials
    denom = 1.0 + z * z / trials
    centre = (p_hat + z * z / (2 * trials)) / denom
    margin = (z / denom) * math.sqrt(
        p_hat * (1 - p_hat) / trials + z * z / (4 * trials * trials)
    )
    return max(0.0, centre - margin), min(1.0, centre + margin)


@dataclass
class SurvivalStats:
    lam: float
    trials: int
    survivals: int
    q_hat: float
    ci_lo: float
    ci_hi: float

    @classmethod
    def from_counts(cls, lam: float, survivals: int, trials: int) -> "SurvivalStats":
        lo, hi = wilson_interval(survivals, trials)
        return cls(
            lam=lam,
            trials=trials,
            survivals=survivals,
            q_hat=survivals / trials if trials else 0.0,
            ci_lo=lo,
            ci_hi=hi,
        )


def _survival_trial(args) -> bool:
    master_seed, trial_index, d, R, p, mass_cap, gen_cap, mode = args
    params = LatticeParams(d, R)
    oracle = BondOracle(master_seed, trial_index, p)
    origin = (0,) * d
    res = run_trial(
        [origin], (), oracle, params, StopRule(mass_cap, gen_cap), mode
    )
    return res.survived


def _eval_batch(
    params: LatticeParams,
    lam: float,
    stop: StopRule,
    master_seed: int,
    indices,
    mode: str,
    workers: int,
    executor: Optional[ProcessPoolExecutor],
) -> list:
    p = lam / params.n_neighbors
    gen_cap = stop.resolved_gen_cap(params)
    args = [
        (master_seed, i, params.d, params.R, p, stop.mass_cap, gen_cap, mode)
        for i in indices
    ]
    if workers > 1 and executor is not None and len(args) > 1:
        chunk = max(1, len(args) // (4 * workers))
        return list(executor.map(_survival_trial, args, chunksize=chunk))
    return [_survival_trial(a) for a in args]


def estimate_survival(
    params: LatticeParams,
    lam: float,
    stop: Optional[StopRule],
    trials: int,
    master_seed: int,
    mode: str = MODE_BOND_EXACT,
    workers: int = 1,
) -> SurvivalStats:
    """Survival fraction over independent trials from a single origin."""
    if trials < 1:
        raise ValueError("need at least one trial")
    if not 1.0 <= lam <= params.n_neighbors:
        raise ValueError(
            f"contact mean {lam} outside [1, V] = [1, {params.n_neighbors}]"
        )
    if stop is None:
        stop = default_stop(params)
    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        flags = _eval_batch(
            params, lam, stop, master_seed, range(trials), mode, workers, executor
        )
    finally:
        if executor is not None:
            executor.shutdown()
    return SurvivalStats.from_counts(lam, sum(flags), trials)


@dataclass
class BisectionPoint:
    lam: float
    trials: int
    survivals: int
    q_hat: float
    ci_lo: float
    ci_hi: float
    classification: str  # "super" | "sub" | "straddle"


@dataclass
class CriticalEstimate:
    d: int
    R: int
    lambda_lo: float
    lambda_hi: float
    lambda_c_hat: float
    theta_hat: float
    bracket_width: float
    trials_total: int
    seed: int
    budget_exhausted: bool
    stop: StopRule
    q_floor: float
    points: list = field(default_factory=list)

    @property
    def theta_positive(self) -> bool:
        """Consistency flag: the estimated excess contact mean is positive."""
        return self.theta_hat > 0.0


def _classify_point(
    params: LatticeParams,
    lam: float,
    stop: StopRule,
    master_seed: int,
    q_floor: float,
    trials_init: int,
    trials_point_max: int,
    budget_left: int,
    mode: str,
    workers: int,
    executor,
) -> BisectionPoint:
    done = 0
    survivals = 0
    target = min(trials_init, trials_point_max, max(budget_left, 1))
    while True:
        idx = range(done, target)
        flags = _eval_batch(
            params, lam, stop, master_seed, idx, mode, workers, executor
        )
        survivals += sum(flags)
        done = target
        lo, hi = wilson_interval(survivals, done)
        if lo > q_floor:
            label = "super"
        elif hi < q_floor:
            label = "sub"
        elif done >= trials_point_max or done >= budget_left:
            label = "straddle"
        else:
            target = min(2 * done, trials_point_max, budget_left)
            continue
        return BisectionPoint(
            lam=lam,
            trials=done,
            survivals=survivals,
            q_hat=survivals / done,
            ci_lo=lo,
            ci_hi=hi,
            classification=label,
        )


def estimate_lambda_c(
    params: LatticeParams,
    master_seed: int,
    stop: Optional[StopRule] = None,
    theta_max: float = 8.0,
    q_floor: float = 0.02,
    tol: Optional[float] = None,
    trials_init: int = 24,
    trials_point_max: int = 512,
    trial_budget: int = 6144,
    mode: str = MODE_BOND_EXACT,
    workers: int = 1,
    check_endpoints: bool = True,
) -> CriticalEstimate:
    """Bracket the critical contact mean by stochastic bisection.

    Returns a bracket (never a point claim): lambda_hi - lambda_lo <= tol
    on success, or the narrowest bracket reached when the trial budget ran
    out, with the flag set.  A midpoint that exhausts its per-point trials
    while straddling the floor is resolved by its point estimate.
    """
    scale = params.scale_power
    lo = 1.0
    hi = min(1.0 + theta_max / scale, float(params.n_neighbors))
    if tol is None:
        tol = 0.05 / scale
    if stop is None:
        stop = default_stop(params)
    budget = trial_budget
    exhausted = False
    points: list = []
    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None

    def classify(lam: float) -> BisectionPoint:
        nonlocal budget, exhausted
        pt = _classify_point(
            params,
            lam,
            stop,
            master_seed,
            q_floor,
            trials_init,
            trials_point_max,
            budget,
            mode,
            workers,
            executor,
        )
        budget -= pt.trials
        if budget <= 0:
            exhausted = True
        points.append(pt)
        return pt

    try:
        if check_endpoints:
            top = classify(hi)
            if top.classification == "sub":
                raise EstimationError(
                    f"top endpoint lambda={hi} classified subcritical "
                    "(q_hat non-monotone beyond noise?); increase caps or theta_max"
                )
            bottom = classify(lo)
            if bottom.classification == "super":
                raise EstimationError(
                    f"bottom endpoint lambda={lo} classified supercritical; "
                    "increase caps"
                )
        while hi - lo > tol and budget > 0:
            mid = 0.5 * (lo + hi)
            pt = classify(mid)
            if pt.classification == "super":
                hi = mid
            elif pt.classification == "sub":
                lo = mid
            else:
                exhausted = True
                if pt.q_hat >= q_floor:
                    hi = mid
                else:
                    lo = mid
    finally:
        if executor is not None:
            executor.shutdown()

    mid = 0.5 * (lo + hi)
    return CriticalEstimate(
        d=params.d,
        R=params.R,
        lambda_lo=lo,
        lambda_hi=hi,
        lambda_c_hat=mid,
        theta_hat=scale * (mid - 1.0),
        bracket_width=hi - lo,
        trials_total=sum(pt.trials for pt in points),
        seed=master_seed,
        budget_exhausted=exhausted or (hi - lo > tol),
        stop=stop,
        q_floor=q_floor,
        points=points,
    )


def sweep(
    d: int,
    R_list: Sequence[int],
    master_seed: int,
    stop: Optional[StopRule] = None,
    skip: Optional[set] = None,
    **kwargs,
) -> list:
    """One critical estimate per range value, independent derived seeds.

    `skip` holds R values already completed (resume support); their rows
    are omitted here and merged back by the caller.
    """
    rows = []
    for R in R_list:
        if skip and R in skip:
            continue
        params = LatticeParams(d, int(R))
        seed_r = derive_seed(master_seed, d, int(R))
        rows.append(
            estimate_lambda_c(params, seed_r, stop=stop, **kwargs)
        )
    return rows


# ---------------------------------------------------------------------------
# Mean infected-count curve (subcriticality certificate)


@dataclass
class MeanEtaCurve:
    theta: float
    R: int
    d: int
    k_max: int
    trials: int
    means: np.ndarray
    ses: np.ndarray
    dip_k: Optional[int]

    def rows(self):
        return [
            (k, float(self.means[k]), float(self.ses[k]))
            for k in range(self.k_max + 1)
        ]


def mean_eta_curve(
    params: LatticeParams,
    theta: float,
    trials: int,
    master_seed: int,
    k_max: Optional[int] = None,
    mode: str = MODE_BOND_EXACT,
    mass_guard: int = 1_000_000,
) -> MeanEtaCurve:
    """Mean infected count per generation with standard errors.

    dip_k is the first generation k >= 1 whose mean plus three standard
    errors falls below 1 -- the Monte Carlo form of the subcriticality
    certificate; None when no generation qualifies.
    """
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1] (mean contact number >= 1)")
    if k_max is None:
        k_max = params.scale_power + 1
    stop = StopRule(mass_cap=mass_guard, gen_cap=k_max)
    origin = (0,) * params.d
    sizes = np.zeros((trials, k_max + 1), dtype=np.int64)
    p = (1.0 + theta / params.scale_power) / params.n_neighbors
    for t in range(trials):
        oracle = BondOracle(master_seed, t, p)
        res = run_trial([origin], (), oracle, params, stop, mode)
        row = res.sizes[: k_max + 1]
        sizes[t, : len(row)] = row
    means = sizes.mean(axis=0)
    ses = sizes.std(axis=0, ddof=1) / math.sqrt(trials)
    dip_k = None
    for k in range(1, k_max + 1):
        if means[k] + 3.0 * ses[k] < 1.0:
            dip_k = k
            break
    return MeanEtaCurve(
        theta=theta,
        R=params.R,
        d=params.d,
        k_max=k_max,
        trials=trials,
        means=means,
        ses=ses,
        dip_k=dip_k,
    )


# ---------------------------------------------------------------------------
# Interference decomposition diagnostics


@dataclass
class InterferenceGenRow:
    n: int
    rho_size: float
    outside_box: float  # recovered sites outside the diffusive box
    low_density_in_box: float
    high_density_in_box: float
    decomposition: float  # outside + low - 2*high
    tau_ordered_sum: float  # time-ordered adjacency sum, units of 1/V
    half_full_sum: float  # half the full adjacency sum, units of 1/V


@dataclass
class InterferenceReport:
    theta: float
    epsilon: float
    K: float
    trials: int
    rows: list  # per-generation means across trials
    pathwise_ok: bool  # tau-ordered sum >= half full sum in every trial/gen


def _neighbor_hit_counts(keys: np.ndarray, members: np.ndarray, dkeys: np.ndarray):
    """For each key, how many of its neighbours belong to `members` (sorted)."""
    V = dkeys.size
    out = np.zeros(keys.size, dtype=np.int64)
    rows = max(1, (1 << 21) // V)
    for lo in range(0, keys.size, rows):
        block = keys[lo : lo + rows]
        cand = block[:, None] + dkeys[None, :]
        hits = epidemic._sorted_member_mask(members, cand.ravel()).reshape(cand.shape)
        out[lo : lo + rows] = hits.sum(axis=1)
    return out


def interference_report(
    traces: list,
    theta: float,
    K: float,
    params: LatticeParams,
) -> InterferenceReport:
    """Exact per-generation decomposition sizes for recorded trials.

    Each trace is the per-generation list of infected key arrays from
    run_trial(record_trace=True); it doubles as the infection-time record
    (a site's time is the generation of the array it first appears in).
    """
    if not traces or any(tr is None for tr in traces):
        raise ValueError("interference diagnostics need trials recorded with traces")
    eps = theta / params.scale_power
    V = params.n_neighbors
    dkeys = lattice.delta_keys(params)
    d = params.d
    n_max = max(len(tr) for tr in traces) - 1
    acc = np.zeros((n_max, 7), dtype=np.float64)
    pathwise_ok = True

    for tr in traces:
        # cumulative recovered-by-n+1 arrays and infection times
        keys_all = np.concatenate(tr) if tr else np.empty(0, np.int64)
        taus_all = np.concatenate(
            [np.full(a.size, i, dtype=np.int64) for i, a in enumerate(tr)]
        )
        order = np.argsort(keys_all, kind="stable")
        keys_sorted = keys_all[order]
        taus_sorted = taus_all[order]
        # first occurrence wins (sites appear once anyway)
        for n in range(n_max):
            upto = min(n, len(tr) - 1)
            sel = taus_sorted <= upto
            rho = keys_sorted[sel]
            taus = taus_sorted[sel]
            coords = lattice.unpack_keys(rho, d)
            linf = np.abs(coords).max(axis=1) if rho.size else np.empty(0)
            box_w = K * math.sqrt(n) * params.R if n > 0 else 0.0
            inside = linf <= box_w
            hit_counts = _neighbor_hit_counts(rho, rho, dkeys)
            dense = hit_counts >= 6.0 * eps * V
            outside = int((~inside).sum())
            high = int((dense & inside).sum())
            low = int(((~dense) & inside).sum())
            # time-ordered adjacency sum vs half the full sum
            tau_cnt = 0
            if rho.size:
                rowsz = max(1, (1 << 21) // V)
                for lo_i in range(0, rho.size, rowsz):
                    block = rho[lo_i : lo_i + rowsz]
                    btau = taus[lo_i : lo_i + rowsz]
                    cand = (block[:, None] + dkeys[None, :]).ravel()
                    idx = np.searchsorted(rho, cand)
                    idxc = np.minimum(idx, rho.size - 1)
                    member = rho[idxc] == cand
                    tau_nb = np.where(member, taus[idxc], np.iinfo(np.int64).max)
                    tau_nb = tau_nb.reshape(block.size, V)
                    tau_cnt += int((tau_nb <= btau[:, None]).sum())
            full_cnt = int(hit_counts.sum())
            if 2 * tau_cnt < full_cnt:
                pathwise_ok = False
            acc[n] += (
                rho.size,
                outside,
                low,
                high,
                outside + low - 2.0 * high,
                tau_cnt / V,
                0.5 * full_cnt / V,
            )

    acc /= len(traces)
    rows = [
        InterferenceGenRow(
            n=n,
            rho_size=acc[n, 0],
            outside_box=acc[n, 1],
            low_density_in_box=acc[n, 2],
            high_density_in_box=acc[n, 3],
            decomposition=acc[n, 4],
            tau_ordered_sum=acc[n, 5],
            half_full_sum=acc[n, 6],
        )
        for n in range(n_max)
    ]
    return InterferenceReport(
        theta=theta,
        epsilon=eps,
        K=K,
        trials=len(traces),
        rows=rows,
        pathwise_ok=pathwise_ok,
    )
