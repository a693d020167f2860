import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rangeperc.gw import (
    GwParams,
    ScheduleReport,
    kolmogorov_estimate,
    near_critical_schedule_check,
    near_critical_survival_constant,
    simulate_survival,
    survival_orbit,
    survival_prob,
    survival_prob_interval,
)


def test_one_generation_closed_form():
    # survival after one generation = 1 - (1-q)^N
    assert survival_prob(GwParams(2, 0.5), 1) == pytest.approx(0.75, abs=1e-12)
    assert survival_prob(GwParams(3, 0.25), 1) == pytest.approx(
        1 - 0.75**3, abs=1e-12
    )


def test_generation_zero_is_one():
    assert survival_prob(GwParams(5, 0.1), 0) == 1.0


def test_critical_kolmogorov_cross_check():
    # N=8, q=1/8: critical, Var = 7/8; exact value near 2/(k*Var) at k=1000
    params = GwParams(8, 1 / 8)
    exact = survival_prob(params, 1000)
    asym = kolmogorov_estimate(params, 1000)
    assert asym == pytest.approx(2 / (1000 * 7 / 8), rel=1e-12)
    assert abs(exact - asym) < 1e-3


def test_survival_constant_values():
    # c -> 0+ limit is 4
    assert near_critical_survival_constant(1e-9) == pytest.approx(4.0, abs=1e-6)
    assert near_critical_survival_constant(1.0) == pytest.approx(
        4.0 / (1.0 - math.exp(-1.0)), rel=1e-12
    )
    assert near_critical_survival_constant(2.0) == pytest.approx(
        8.0 / (1.0 - math.exp(-2.0)), rel=1e-12
    )
    with pytest.raises(ValueError):
        near_critical_survival_constant(0.0)


def test_schedule_check_c1():
    rep = near_critical_schedule_check(1.0, 24, [100, 1000, 10000])
    assert isinstance(rep, ScheduleReport)
    assert rep.all_ok
    limit = 1.05 * near_critical_survival_constant(1.0)
    for row in rep.rows:
        assert row.k_times_survival <= limit
        assert row.q <= 0.5 and 1.0 <= row.mean <= 1.0 + 1.0 / row.k + 1e-9


def test_schedule_check_rejects_bad_schedules():
    with pytest.raises(ValueError):
        near_critical_schedule_check(1.0, 24, [10], q_of_k=lambda k: 0.9 / 24)
    with pytest.raises(ValueError):
        near_critical_schedule_check(1.0, 2, [10])  # q = (1+c/k)/2 > 1/2


def test_subcritical_and_critical_decay():
    sub = GwParams(24, 0.9 / 24)
    vals = survival_orbit(sub, [10, 50, 200])
    assert vals[10] > vals[50] > vals[200]
    assert 200 * vals[200] < 1e-6  # k*P -> 0
    crit = GwParams(24, 1.0 / 24)
    for k in (100, 1000):
        kp = k * survival_prob(crit, k)
        assert kp <= 1.05 * near_critical_survival_constant(0.5)


@settings(max_examples=40, deadline=None)
@given(
    N=st.integers(2, 30),
    q_mil=st.integers(1, 400_000),
    k=st.integers(1, 60),
)
def test_monotonicity_properties(N, q_mil, k):
    q = q_mil / 1_000_000 * (1.0 / N) * 2  # keep mean <= 0.8-ish to 2-ish
    q = min(q, 1.0)
    params = GwParams(N, q)
    a = survival_prob(params, k)
    b = survival_prob(params, k + 3)
    assert 0.0 <= b <= a <= 1.0
    if q < 0.95:
        richer = survival_prob(GwParams(N, min(1.0, q + 0.02)), k)
        assert richer >= a - 1e-12


def test_interval_precision_near_critical():
    # k = 10^4 with mean 1 + 1/k: the cancellation-hostile regime
    k = 10_000
    q = (1.0 + 1.0 / k) / 24
    lo, hi = survival_prob_interval(GwParams(24, q), k)
    assert lo <= hi
    assert (hi - lo) / lo < 1e-9
    point = survival_prob(GwParams(24, q), k)
    # the float64 rounding of the point may sit half an ulp past an endpoint
    assert lo - 2e-16 * point <= point <= hi + 2e-16 * point


def test_monte_carlo_cross_check():
    params = GwParams(24, 1.05 / 24)
    rng = np.random.default_rng(505)
    trials = 100_000
    for k in (10, 50):
        exact = survival_prob(params, k)
        mc = simulate_survival(params, k, trials, rng)
        se = math.sqrt(exact * (1 - exact) / trials)
        assert abs(mc - exact) < 4 * se
