"""Exact Galton-Watson survival analytics for Binomial(N, q) offspring.

Survival probabilities come from iterating the offspring generating
function f(s) = (1 - q + q s)^N at 0, tracked as u_k = 1 - f^k(0) so the
near-critical cancellation (u -> 0 while f^k(0) -> 1) never hits double
rounding: the orbit is iterated in mpmath arbitrary precision, with an
interval variant for verified error bounds.

The headline constant 4c / (1 - e^{-c}) bounds limsup k * P(survive k
generations) over schedules with q_k <= 1/2 and 1 <= N_k q_k <= 1 + c/k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import mpmath as mp


@dataclass(frozen=True)
class GwParams:
    """Binomial offspring law: N trials, success probability q."""

    N: int
    q: float

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not 0.0 <= self.q <= 1.0:
            raise ValueError("q must lie in [0, 1]")

    @property
    def mean(self) -> float:
        return self.N * self.q

    @property
    def variance(self) -> float:
        return self.N * self.q * (1.0 - self.q)


def survival_orbit(params: GwParams, k_list: Sequence[int], digits: int = 50) -> dict:
    """P(generation k is nonempty) for every k in k_list, exact pgf orbit.

    Iterates u_{k+1} = 1 - (1 - q u_k)^N from u_0 = 1 at `digits` working
    precision and returns {k: float}.  One forward pass up to max(k_list).
    """
    ks = sorted(set(int(k) for k in k_list))
    if ks and ks[0] < 0:
        raise ValueError("generation counts must be >= 0")
    out = {}
    with mp.workdps(digits):
        q = mp.mpf(params.q)
        u = mp.mpf(1)
        want = set(ks)
        if 0 in want:
            out[0] = 1.0
        top = ks[-1] if ks else 0
        for k in range(1, top + 1):
            u = 1 - (1 - q * u) ** params.N
            if k in want:
                out[k] = float(u)
    return out


def survival_prob(params: GwParams, k: int, digits: int = 50) -> float:
    """P(the process started from one particle is alive at generation k)."""
    return survival_orbit(params, [k], digits)[k]


def survival_prob_interval(params: GwParams, k: int, digits: int = 50):
    """Verified (lower, upper) enclosure of the survival probability.

    Runs the same orbit in interval arithmetic; the width certifies the
    rounding error of the iteration.  The interval context carries its
    own precision, set here alongside the scalar one.
    """
    old_dps = mp.iv.dps
    try:
        mp.iv.dps = digits
        q = mp.iv.mpf(params.q)  # exact binary value, matching the scalar orbit
        u = mp.iv.mpf(1)
        one = mp.iv.mpf(1)
        for _ in range(k):
            u = one - (one - q * u) ** params.N
        return float(mp.mpf(u.a)), float(mp.mpf(u.b))
    finally:
        mp.iv.dps = old_dps


def kolmogorov_estimate(params: GwParams, k: int) -> float:
    """Classical critical-case decay 2/(k*Var); sanity oracle, not exact."""
    return 2.0 / (k * params.variance)


def near_critical_survival_constant(c: float) -> float:
    """The bound constant 4c / (1 - e^{-c}); tends to 4 as c -> 0+."""
    if c <= 0:
        raise ValueError("c must be positive")
    return 4.0 * c / (-math.expm1(-c))


@dataclass
class ScheduleRow:
    k: int
    N: int
    q: float
    mean: float
    survival: float
    k_times_survival: float
    bound: float
    ok: bool


@dataclass
class ScheduleReport:
    c: float
    slack: float
    rows: list

    @property
    def all_ok(self) -> bool:
        return all(r.ok for r in self.rows)


def near_critical_schedule_check(
    c: float,
    N: int,
    k_list: Sequence[int],
    slack: float = 0.05,
    q_of_k=None,
    digits: int = 50,
) -> ScheduleReport:
    """Check k * P(alive at k) against (1 + slack) * 4c/(1 - e^{-c}).

    The default schedule takes q_k = (1 + c/k) / N, the hardest (largest)
    mean allowed.  Each (N, q_k) must satisfy q_k <= 1/2 and
    1 <= N q_k <= 1 + c/k; violations raise.  The slack acknowledges that
    the bound is a limsup statement being probed at finite k.
    """
    bound_const = near_critical_survival_constant(c)
    rows = []
    for k in sorted(set(int(k) for k in k_list)):
        if k < 1:
            raise ValueError("schedule generations must be >= 1")
        q = q_of_k(k) if q_of_k is not None else (1.0 + c / k) / N
        if q > 0.5:
            raise ValueError(f"schedule violates q <= 1/2 at k={k} (q={q})")
        mean = N * q
        if not (1.0 - 1e-12 <= mean <= 1.0 + c / k + 1e-12):
            raise ValueError(
                f"schedule violates 1 <= N*q <= 1 + c/k at k={k} (N*q={mean})"
            )
        surv = survival_prob(GwParams(N=N, q=q), k, digits=digits)
        ks = k * surv
        limit = (1.0 + slack) * bound_const
        rows.append(
            ScheduleRow(
                k=k,
                N=N,
                q=q,
                mean=mean,
                survival=surv,
                k_times_survival=ks,
                bound=limit,
                ok=ks <= limit,
            )
        )
    return ScheduleReport(c=c, slack=slack, rows=rows)


def simulate_survival(
    params: GwParams, k: int, trials: int, rng, batch: Optional[int] = None
) -> float:
    """Monte Carlo survival estimate (population-size chain); oracle cross-check.

    The chain only needs sizes: the next size given size s is
    Binomial(N*s, q).  `rng` is a numpy Generator.
    """
    import numpy as np

    alive = np.ones(trials, dtype=np.int64)
    for _ in range(k):
        live = alive > 0
        if not live.any():
            break
        alive[live] = rng.binomial(alive[live] * params.N, params.q)
    return float((alive > 0).mean())
