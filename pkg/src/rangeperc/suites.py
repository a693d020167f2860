"""Invariant verification suites.

Each suite runs one falsifiable check batch at a configurable scale whose
defaults match the package's acceptance settings, and returns a SuiteResult
with per-row records (CSV-ready dicts) and an overall pass flag.  The CLI
`verify` subcommand wraps these; the acceptance test module calls them
directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import branching, epidemic, estimators, gw
from .bonds import BondOracle, StreamRng, derive_seed, uniform01_trials
from .branching import brw_batch, run_coupled_trial, walk_box_exit, walk_halfspace_prob
from .epidemic import (
    MODE_BOND_EXACT,
    EpidemicState,
    StopRule,
    monotone_coupling_check,
    percolation_cluster,
    run_trial,
    step,
)
from .estimators import mean_eta_curve
from .lattice import LatticeParams, pack_site, unpack_keys

# internal seed-derivation tags
_T_GROW = 101
_T_REPLAY = 102
_T_MONO = 201
_T_EQ = 301


@dataclass
class SuiteResult:
    name: str
    passed: bool
    rows: list = field(default_factory=list)
    summary: str = ""


def equivalence_suite(
    master_seed: int,
    trials_per_config: int = 42,
    d_list: Sequence[int] = (1, 2),
    R_list: Sequence[int] = (1, 2),
    p_list: Sequence[float] = (0.1, 0.3, 0.6),
    mass_cap: int = 1000,
) -> SuiteResult:
    """Exact equality of epidemic generations and cluster distance shells."""
    rows = []
    total_mismatch = 0
    for d in d_list:
        for R in R_list:
            params = LatticeParams(d, R)
            stop = StopRule(mass_cap=mass_cap, gen_cap=10**9)
            for p in p_list:
                seed = derive_seed(master_seed, _T_EQ, d, R, int(p * 1000))
                mismatches = 0
                for t in range(trials_per_config):
                    oracle = BondOracle(seed, t, p)
                    res = run_trial(
                        [(0,) * d], (), oracle, params, stop, record_trace=True
                    )
                    cl = percolation_cluster((0,) * d, oracle, params, cap=mass_cap)
                    if res.mass_cap_hit != cl.truncated:
                        mismatches += 1
                        continue
                    for n, keys in enumerate(res.trace):
                        got = set(map(tuple, unpack_keys(keys, d).tolist()))
                        if got != cl.shell(n):
                            mismatches += 1
                            break
                total_mismatch += mismatches
                rows.append(
                    {
                        "d": d,
                        "R": R,
                        "p": p,
                        "trials": trials_per_config,
                        "mismatches": mismatches,
                    }
                )
    n_trials = len(rows) * trials_per_config
    return SuiteResult(
        name="equivalence",
        passed=total_mismatch == 0,
        rows=rows,
        summary=f"{n_trials} trials, {total_mismatch} shell mismatches",
    )


def coupling_suite(
    master_seed: int,
    trials: int = 1000,
    d: int = 2,
    R_list: Sequence[int] = (1, 2, 4),
    theta: float = 1.0,
    horizon: int = 50,
    particle_cap: int = 20_000,
) -> SuiteResult:
    """Pointwise domination of the epidemic by the coupled envelope."""
    rows = []
    violations = 0
    for R in R_list:
        params = LatticeParams(d, R)
        p = (1.0 + theta / params.scale_power) / params.n_neighbors
        seed = derive_seed(master_seed, d, R)
        viol_r = 0
        max_gens = 0
        capped = 0
        for t in range(trials):
            try:
                res = run_coupled_trial(
                    seed, t, params, p, horizon=horizon, particle_cap=particle_cap
                )
            except AssertionError:
                viol_r += 1
                continue
            if any(e > z for e, z in zip(res.eta_sizes, res.z_totals)):
                viol_r += 1
            max_gens = max(max_gens, res.gens)
            capped += res.capped
        violations += viol_r
        rows.append(
            {
                "R": R,
                "trials": trials,
                "violations": viol_r,
                "max_gens": max_gens,
                "capped_trials": capped,
            }
        )
    return SuiteResult(
        name="coupling",
        passed=violations == 0,
        rows=rows,
        summary=f"{trials} coupled trials per R, {violations} domination violations",
    )


def _grow_state(params: LatticeParams, p: float, seed: int, gens: int):
    """A frozen nonempty state grown by a short run at matched parameters."""
    for attempt in range(200):
        state = EpidemicState.from_seeds([(0,) * params.d])
        oracle = BondOracle(seed, attempt, p)
        ok = True
        for _ in range(gens):
            state = step(state, oracle, params)
            if not state.infected:
                ok = False
                break
        if ok:
            return state
    raise RuntimeError("could not grow a surviving state; raise the attempt budget")


def _replay_increment_z(
    state: EpidemicState,
    params: LatticeParams,
    p: float,
    theta: float,
    replay_seed: int,
    replays: int,
) -> tuple:
    """Replay one generation many times.

    Returns (mc_mean, formula, z, exact, z_exact): z scores the MC mean of
    the set-size increment against the closed-form attempt count, z_exact
    against the exact conditional mean sum_y [1 - (1-p)^{deg y}] - |eta|.
    The two references differ by the simultaneous-infection overlap, which
    is O(p^2) per multiply-targeted site.
    """
    edges = epidemic.frontier(state, params)
    if not edges:
        return 0.0, 0.0, 0.0, 0.0, 0.0
    ka = np.asarray([pack_site(e.src) for e in edges], dtype=np.int64)
    kb = np.asarray([pack_site(e.dst) for e in edges], dtype=np.int64)
    kmin, kmax = np.minimum(ka, kb), np.maximum(ka, kb)
    tgt = kb
    order = np.argsort(tgt, kind="stable")
    kmin, kmax, tgt = kmin[order], kmax[order], tgt[order]
    seg_starts = np.flatnonzero(np.r_[True, tgt[1:] != tgt[:-1]])
    degrees = np.diff(np.r_[seg_starts, tgt.size])
    counts = np.empty(replays, dtype=np.int64)
    chunk = max(1, (1 << 21) // max(kmin.size, 1))
    for lo in range(0, replays, chunk):
        idx = np.arange(lo, min(lo + chunk, replays))
        u = uniform01_trials(replay_seed, idx[:, None], kmin[None, :], kmax[None, :])
        open_ = u < p
        per_target = np.maximum.reduceat(open_, seg_starts, axis=1)
        counts[lo : lo + idx.size] = per_target.sum(axis=1)
    deltas = counts - len(state.infected)
    formula = epidemic.expected_increment(state, theta, params)
    exact = float((1.0 - (1.0 - p) ** degrees).sum()) - len(state.infected)
    mc = float(deltas.mean())
    se = float(deltas.std(ddof=1)) / math.sqrt(replays)
    z = (mc - formula) / se if se > 0 else 0.0
    z_exact = (mc - exact) / se if se > 0 else 0.0
    return mc, formula, z, exact, z_exact


def increment_suite(
    master_seed: int,
    n_states: int = 50,
    replays: int = 10_000,
    d: int = 2,
    combos: Sequence[tuple] = ((2, 0.5), (2, 1.0), (4, 0.5), (4, 1.0)),
    grow_gens: Sequence[int] = (2, 3, 4),
    z_limit: float = 4.0,
) -> SuiteResult:
    """Conditional one-generation increment versus the closed form.

    `passed` scores against the closed-form attempt count; the rows also
    carry z_exact against the exact set-size conditional mean, which
    isolates any discrepancy to the overlap term rather than the engine.
    """
    rows = []
    worst = 0.0
    worst_exact = 0.0
    for i in range(n_states):
        R, theta = combos[i % len(combos)]
        params = LatticeParams(d, R)
        p = (1.0 + theta / params.scale_power) / params.n_neighbors
        gens = grow_gens[i % len(grow_gens)]
        state = _grow_state(params, p, derive_seed(master_seed, _T_GROW, i), gens)
        mc, formula, z, exact, z_exact = _replay_increment_z(
            state, params, p, theta, derive_seed(master_seed, _T_REPLAY, i), replays
        )
        worst = max(worst, abs(z))
        worst_exact = max(worst_exact, abs(z_exact))
        rows.append(
            {
                "state": i,
                "R": R,
                "theta": theta,
                "eta_size": len(state.infected),
                "mc_mean": mc,
                "formula": formula,
                "z": z,
                "exact_mean": exact,
                "z_exact": z_exact,
            }
        )
    return SuiteResult(
        name="increment",
        passed=worst <= z_limit,
        rows=rows,
        summary=(
            f"{n_states} states x {replays} replays, max |z| = {worst:.2f} "
            f"vs closed form (max |z_exact| = {worst_exact:.2f} vs exact law)"
        ),
    )


def mean_measure_suite(
    master_seed: int,
    trials: int = 100_000,
    d: int = 2,
    R: int = 2,
    theta: float = 1.0,
    k_max: int = 10,
    halfspace_ks: Sequence[int] = (3, 6),
    z_limit: float = 3.0,
) -> SuiteResult:
    """Envelope mean growth lambda^k, total and on a half-space."""
    params = LatticeParams(d, R)
    lam = 1.0 + theta / params.scale_power
    p = lam / params.n_neighbors
    res = brw_batch(
        trials, k_max, params, p, master_seed, track_halfspace=True
    )
    rows = []
    worst = 0.0
    for k in range(1, k_max + 1):
        target = lam**k
        mean = float(res.totals[:, k].mean())
        se = float(res.totals[:, k].std(ddof=1)) / math.sqrt(trials)
        z = (mean - target) / se
        worst = max(worst, abs(z))
        rows.append(
            {"check": "total", "k": k, "mean": mean, "target": target, "z": z}
        )
    for k in halfspace_ks:
        target = lam**k * walk_halfspace_prob(params, k)
        mean = float(res.halfspace[:, k].mean())
        se = float(res.halfspace[:, k].std(ddof=1)) / math.sqrt(trials)
        z = (mean - target) / se
        worst = max(worst, abs(z))
        rows.append(
            {"check": "halfspace", "k": k, "mean": mean, "target": target, "z": z}
        )
    return SuiteResult(
        name="mean-measure",
        passed=worst <= z_limit,
        rows=rows,
        summary=f"{trials} envelope trials, max |z| = {worst:.2f}",
    )


def gw_bound_suite(
    C: float = 1.0,
    N: int = 24,
    k_list: Sequence[int] = (100, 1000, 10_000),
    slack: float = 0.05,
) -> SuiteResult:
    """Near-critical schedules: k * P(alive at k) against the bound constant."""
    rep = gw.near_critical_schedule_check(C, N, k_list, slack=slack)
    rows = [
        {
            "k": r.k,
            "N": r.N,
            "q": r.q,
            "k_times_survival": r.k_times_survival,
            "bound": r.bound,
            "ok": r.ok,
        }
        for r in rep.rows
    ]
    return SuiteResult(
        name="gw-bound",
        passed=rep.all_ok,
        rows=rows,
        summary=f"C={C}, N={N}: all k*P <= {rep.rows[0].bound:.4f}" if rows else "",
    )


def azuma_suite(
    master_seed: int,
    d: int = 2,
    R: int = 4,
    n: int = 100,
    K_list: Sequence[float] = (2.0, 3.0),
    trials: int = 100_000,
) -> SuiteResult:
    """Box-exit probabilities under the sub-Gaussian martingale bound."""
    params = LatticeParams(d, R)
    rows = []
    ok = True
    for K in K_list:
        rep = walk_box_exit(params, n, K, trials, derive_seed(master_seed, int(K * 100)))
        worst = max(r.p_hat for r in rep.rows)
        ok = ok and worst <= rep.bound
        rows.append(
            {
                "K": K,
                "n": n,
                "trials": trials,
                "max_exit_p": worst,
                "bound": rep.bound,
                "vacuous": rep.vacuous,
            }
        )
    return SuiteResult(
        name="azuma",
        passed=ok,
        rows=rows,
        summary=f"exit estimates vs 2d*exp(-K^2/2) at every k <= {n}",
    )


def range_tail_suite(
    master_seed: int,
    d: int = 2,
    R: int = 8,
    theta: float = 1.0,
    n: int = 64,
    r_grid: Sequence[float] = (1, 2, 4, 8),
    trials: int = 2000,
    c: float = 8.0,
    K: float = 1.0,
) -> SuiteResult:
    """Cumulative-range tail: nesting (exact) and inverse-square shape."""
    params = LatticeParams(d, R)
    rep = branching.range_tail(
        params, theta, n, r_grid, trials, master_seed, c=c, K=K
    )
    rows = [
        {"r": r.r, "trials": r.trials, "hits": r.hits, "p_hat": r.p_hat, "scaled": r.scaled}
        for r in rep.rows
    ]
    phats = [r.p_hat for r in rep.rows]
    nested = all(a >= b for a, b in zip(phats, phats[1:]))
    scaled = [r.scaled for r in rep.rows]
    strictly_increasing = all(a < b for a, b in zip(scaled, scaled[1:]))
    return SuiteResult(
        name="range-tail",
        passed=nested and not strictly_increasing,
        rows=rows,
        summary=(
            f"nesting {'ok' if nested else 'VIOLATED'}; scaled column "
            f"{'strictly increasing (shape check failed)' if strictly_increasing else 'not monotone-increasing'}"
        ),
    )


def mean_dip_suite(
    master_seed: int,
    d: int = 2,
    R: int = 4,
    theta: float = 0.05,
    trials: int = 100_000,
) -> SuiteResult:
    """Existence of a generation with mean infected count below one."""
    params = LatticeParams(d, R)
    curve = mean_eta_curve(params, theta, trials, master_seed)
    rows = [
        {"k": k, "mean": m, "se": s} for k, m, s in curve.rows()
    ]
    k_window = params.scale_power + 1
    ok = curve.dip_k is not None and curve.dip_k <= k_window
    return SuiteResult(
        name="mean-dip",
        passed=ok,
        rows=rows,
        summary=(
            f"theta={theta}, dip at k={curve.dip_k} (window 1..{k_window})"
            if curve.dip_k
            else f"theta={theta}: no dip within 1..{k_window}"
        ),
    )


def monotone_suite(
    master_seed: int,
    instances: int = 1000,
    d: int = 2,
    R: int = 1,
    horizon: int = 20,
    p: float = 0.35,
    box_radius: int = 3,
) -> SuiteResult:
    """Blocked-epidemic containment over random recovered seeds."""
    params = LatticeParams(d, R)
    rng = np.random.default_rng(derive_seed(master_seed, _T_MONO))
    failures = 0
    for i in range(instances):
        m = int(rng.integers(0, 13))
        pts = set()
        for _ in range(m):
            site = tuple(int(v) for v in rng.integers(-box_radius, box_radius + 1, size=d))
            if site != (0,) * d:
                pts.add(site)
        oracle = BondOracle(derive_seed(master_seed, _T_MONO, i), i, p)
        if not monotone_coupling_check([(0,) * d], sorted(pts), oracle, params, horizon):
            failures += 1
    return SuiteResult(
        name="monotone-coupling",
        passed=failures == 0,
        rows=[{"instances": instances, "failures": failures, "horizon": horizon}],
        summary=f"{instances} random blocked instances, {failures} containment failures",
    )


SUITES = {
    "equivalence": equivalence_suite,
    "coupling": coupling_suite,
    "increment": increment_suite,
    "mean-measure": mean_measure_suite,
    "gw-bound": gw_bound_suite,
    "azuma": azuma_suite,
    "range-tail": range_tail_suite,
    "mean-dip": mean_dip_suite,
    "monotone-coupling": monotone_suite,
}
