import math

import numpy as np
import pytest

from rangeperc.bonds import BondOracle
from rangeperc.epidemic import StopRule, run_trial
from rangeperc.estimators import (
    CriticalEstimate,
    EstimationError,
    default_stop,
    estimate_lambda_c,
    estimate_survival,
    interference_report,
    mean_eta_curve,
    sweep,
    wilson_interval,
)
from rangeperc.lattice import LatticeParams


def test_wilson_basics():
    lo, hi = wilson_interval(5, 10)
    assert 0 < lo < 0.5 < hi < 1
    lo0, hi0 = wilson_interval(0, 20)
    assert lo0 == 0.0 and 0 < hi0 < 0.2
    lon, hin = wilson_interval(20, 20)
    assert hin == 1.0 and 0.8 < lon < 1
    assert wilson_interval(0, 0) == (0.0, 1.0)
    with pytest.raises(ValueError):
        wilson_interval(5, 4)


def test_wilson_coverage():
    # 95% interval covers the true proportion 93-97% of the time
    rng = np.random.default_rng(8080)
    q, n, reps = 0.3, 50, 10_000
    hits = 0
    ks = rng.binomial(n, q, size=reps)
    for k in ks:
        lo, hi = wilson_interval(int(k), n)
        hits += lo <= q <= hi
    assert 0.93 <= hits / reps <= 0.97


def test_estimate_survival_p1_certain():
    params = LatticeParams(1, 1)
    stats = estimate_survival(
        params, lam=2.0, stop=StopRule(mass_cap=50, gen_cap=100), trials=20, master_seed=3
    )
    assert stats.q_hat == 1.0 and stats.survivals == 20


def test_estimate_survival_d1_subcritical():
    # d=1, R=1, p = 1/2: survival requires an unbroken infinite chain
    params = LatticeParams(1, 1)
    stats = estimate_survival(
        params, lam=1.0, stop=StopRule(mass_cap=500, gen_cap=2000), trials=200, master_seed=4
    )
    assert stats.q_hat == 0.0


def test_estimate_survival_validates_lambda():
    params = LatticeParams(1, 1)
    with pytest.raises(ValueError):
        estimate_survival(params, lam=3.0, stop=None, trials=5, master_seed=0)


def test_monotone_separation_two_lambdas():
    # clearly separated survival fractions at 1e3 trials (d=2, R=4)
    params = LatticeParams(2, 4)
    stop = StopRule(mass_cap=2000, gen_cap=400)
    hi = estimate_survival(params, 1.0 + 3.0 / 4, stop, 1000, master_seed=77)
    lo = estimate_survival(params, 1.0 + 0.1 / 4, stop, 1000, master_seed=77)
    se = math.sqrt(
        hi.q_hat * (1 - hi.q_hat) / hi.trials + max(lo.q_hat * (1 - lo.q_hat), 1e-9) / lo.trials
    )
    assert hi.q_hat - lo.q_hat >= 5 * se


def test_survival_indicator_monotone_along_lambda_path():
    # shared trial indices: survival flags are pathwise monotone in lambda
    params = LatticeParams(2, 2)
    stop = StopRule(mass_cap=500, gen_cap=10_000)
    lams = [1.1, 1.4, 1.8, 2.4, 3.2]
    V = params.n_neighbors
    for t in range(40):
        prev = False
        for lam in lams:
            res = run_trial(
                [(0, 0)], (), BondOracle(606, t, lam / V), params, stop
            )
            assert res.survived or not prev
            prev = res.survived


def test_estimate_lambda_c_d1_pushes_to_top():
    params = LatticeParams(1, 1)
    est = estimate_lambda_c(
        params,
        master_seed=11,
        stop=StopRule(mass_cap=2000, gen_cap=3000),
        trials_init=16,
        trials_point_max=128,
        trial_budget=2000,
    )
    assert est.lambda_hi == pytest.approx(2.0)
    assert est.lambda_c_hat > 1.9
    assert isinstance(est, CriticalEstimate)


def test_estimate_lambda_c_small_case_and_determinism():
    params = LatticeParams(2, 2)
    kwargs = dict(
        stop=StopRule(mass_cap=3000, gen_cap=1500),
        trials_init=16,
        trials_point_max=256,
        trial_budget=1500,
        tol=0.05,
    )
    a = estimate_lambda_c(params, master_seed=909, **kwargs)
    b = estimate_lambda_c(params, master_seed=909, **kwargs)
    assert a.lambda_c_hat == b.lambda_c_hat
    assert a.trials_total == b.trials_total
    assert [p.survivals for p in a.points] == [p.survivals for p in b.points]
    # theta consistency flag
    assert a.theta_positive
    # R=2 bracket lands in a sane region (deep-run reference ~ 1.5-1.7)
    assert 1.2 < a.lambda_c_hat < 2.2


def test_estimate_lambda_c_workers_match():
    params = LatticeParams(2, 1)
    kwargs = dict(
        stop=StopRule(mass_cap=800, gen_cap=800),
        trials_init=16,
        trials_point_max=64,
        trial_budget=600,
        tol=0.1,
    )
    seq = estimate_lambda_c(params, master_seed=42, workers=1, **kwargs)
    par = estimate_lambda_c(params, master_seed=42, workers=2, **kwargs)
    assert seq.lambda_c_hat == par.lambda_c_hat
    assert [p.survivals for p in seq.points] == [p.survivals for p in par.points]


def test_endpoint_misclassification_error():
    # caps so small that even lambda = V dies: top endpoint flagged
    params = LatticeParams(1, 1)
    with pytest.raises(EstimationError):
        estimate_lambda_c(
            params,
            master_seed=5,
            stop=StopRule(mass_cap=10**9, gen_cap=2),
            trials_init=64,
            trials_point_max=256,
            trial_budget=600,
        )


def test_sweep_rows_and_skip():
    params_kwargs = dict(
        stop=StopRule(mass_cap=400, gen_cap=400),
        trials_init=8,
        trials_point_max=32,
        trial_budget=200,
        tol=0.2,
        check_endpoints=False,
    )
    rows = sweep(2, [1, 2], master_seed=313, **params_kwargs)
    assert [r.R for r in rows] == [1, 2]
    rows2 = sweep(2, [1, 2], master_seed=313, skip={1}, **params_kwargs)
    assert [r.R for r in rows2] == [2]
    assert rows2[0].lambda_c_hat == rows[1].lambda_c_hat  # per-R seeds derived


def test_mean_eta_curve_basics():
    params = LatticeParams(2, 2)
    curve = mean_eta_curve(params, theta=0.5, trials=2000, master_seed=21)
    assert curve.means[0] == 1.0 and curve.ses[0] == 0.0
    assert curve.k_max == params.scale_power + 1
    assert len(curve.rows()) == curve.k_max + 1
    with pytest.raises(ValueError):
        mean_eta_curve(params, theta=0.0, trials=10, master_seed=0)
    with pytest.raises(ValueError):
        mean_eta_curve(params, theta=-0.2, trials=10, master_seed=0)


def test_mean_eta_dip_exists_at_small_theta():
    params = LatticeParams(2, 4)
    curve = mean_eta_curve(params, theta=0.05, trials=20_000, master_seed=33)
    assert curve.dip_k is not None and curve.dip_k <= params.R + 1


def test_interference_single_site_trial():
    params = LatticeParams(2, 1)
    res = run_trial(
        [(0, 0)], (), BondOracle(1, 0, 0.0), params, StopRule(), record_trace=True
    )
    rep = interference_report([res.trace], theta=0.5, K=3.0, params=params)
    for row in rep.rows:
        assert row.tau_ordered_sum == 0.0
        assert row.half_full_sum == 0.0
        assert row.outside_box == 0.0
    assert rep.pathwise_ok


def test_interference_partition_and_tau_bound():
    params = LatticeParams(2, 2)
    p = 1.5 / params.n_neighbors
    traces = []
    for t in range(60):
        res = run_trial(
            [(0, 0)], (), BondOracle(808, t, p), params,
            StopRule(mass_cap=400, gen_cap=12), record_trace=True,
        )
        traces.append(res.trace)
    rep = interference_report(traces, theta=1.0, K=3.0, params=params)
    assert rep.pathwise_ok  # tau-ordered sum >= half the full sum, every trial
    for row in rep.rows:
        # exact partition: rho = outside + dense-inside + sparse-inside
        assert row.rho_size == pytest.approx(
            row.outside_box + row.low_density_in_box + row.high_density_in_box
        )
        assert row.tau_ordered_sum >= row.half_full_sum - 1e-12


def test_interference_requires_traces():
    with pytest.raises(ValueError):
        interference_report([None], theta=0.5, K=3.0, params=LatticeParams(2, 1))


def test_default_stop_scaling():
    assert default_stop(LatticeParams(2, 4)).gen_cap == 400
    assert default_stop(LatticeParams(3, 2)).gen_cap == 400
    assert default_stop(LatticeParams(2, 16)).gen_cap == 1600
    assert default_stop(LatticeParams(2, 4)).mass_cap == 50_000
