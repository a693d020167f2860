import math

import numpy as np
import pytest

from rangeperc.bonds import StreamRng, TAG_BRW
from rangeperc.branching import (
    BrwPopulation,
    _distinct_children,
    brw_batch,
    brw_step,
    coupled_step,
    initial_coupled_state,
    range_tail,
    run_coupled_trial,
    rw_step,
    walk_axis_distribution,
    walk_box_exit,
    walk_halfspace_prob,
)
from rangeperc.lattice import LatticeParams, delta_keys, neighbor_offsets, pack_site, unpack_keys

P22 = LatticeParams(2, 2)


def test_population_basics():
    pop = BrwPopulation.single_origin(P22)
    assert pop.total == 1 and pop.n == 0
    assert pop.count_at((0, 0)) == 1
    assert pop.count_at((1, 0)) == 0


def test_offspring_prob_validation():
    pop = BrwPopulation.single_origin(P22)
    rng = StreamRng(1, 0, TAG_BRW)
    with pytest.raises(ValueError):
        brw_step(pop, rng, P22, 0.01)  # mean offspring < 1
    with pytest.raises(ValueError):
        brw_step(pop, rng, P22, 1.5)


def test_sibling_displacements_distinct():
    rng = StreamRng(77, 0, TAG_BRW)
    dkeys = delta_keys(P22)
    parents = np.full(3000, pack_site((0, 0)), dtype=np.int64)
    m = np.full(3000, 3, dtype=np.int64)
    children, _ = _distinct_children(rng.generator, parents, m, dkeys)
    fam = children.reshape(3000, 3)
    assert (np.diff(np.sort(fam, axis=1), axis=1) != 0).all()


def test_distinct_children_large_m_path():
    # m > V/2 exercises the permutation-prefix fallback
    params = LatticeParams(1, 1)  # V = 2
    rng = StreamRng(5, 0, TAG_BRW)
    dkeys = delta_keys(params)
    parents = np.full(500, pack_site((0,)), dtype=np.int64)
    m = np.full(500, 2, dtype=np.int64)
    children, _ = _distinct_children(rng.generator, parents, m, dkeys)
    fam = np.sort(children.reshape(500, 2), axis=1)
    assert (fam[:, 0] != fam[:, 1]).all()
    # both displacements must appear in every family of size V
    key0 = pack_site((0,))
    assert set(map(tuple, (fam - key0).tolist())) == {(int(dkeys.min()), int(dkeys.max()))}


def test_population_counts_consistency():
    pop = BrwPopulation.single_origin(P22)
    rng = StreamRng(9, 3, TAG_BRW)
    p = 1.5 / P22.n_neighbors
    for _ in range(12):
        pop = brw_step(pop, rng, P22, p)
        assert pop.total == int(pop.counts.sum())
        assert (pop.counts >= 1).all() or pop.total == 0
        assert (np.diff(pop.keys) > 0).all()
        if pop.total == 0:
            break


def test_mean_growth_matches_power():
    # E[Z_k] = (1 + theta/R)^k for d=2
    n_trials, k_max = 30_000, 6
    p = 1.5 / P22.n_neighbors
    res = brw_batch(n_trials, k_max, P22, p, master_seed=1212)
    for k in range(1, k_max + 1):
        target = 1.5**k
        mean = res.totals[:, k].mean()
        se = res.totals[:, k].std(ddof=1) / math.sqrt(n_trials)
        assert abs(mean - target) < 4 * se


def test_halfspace_mean_measure():
    n_trials = 30_000
    p = 1.5 / P22.n_neighbors
    res = brw_batch(n_trials, 6, P22, p, master_seed=333, track_halfspace=True)
    for k in (3, 6):
        target = 1.5**k * walk_halfspace_prob(P22, k)
        mean = res.halfspace[:, k].mean()
        se = res.halfspace[:, k].std(ddof=1) / math.sqrt(n_trials)
        assert abs(mean - target) < 4 * se


def test_walk_axis_distribution_exact():
    # one-step law matches direct enumeration of the displacement set
    for params in (LatticeParams(1, 2), P22, LatticeParams(3, 1)):
        vals, probs = walk_axis_distribution(params, 1)
        offs = np.asarray(neighbor_offsets(params))
        counts = {a: int((offs[:, 0] == a).sum()) for a in range(-params.R, params.R + 1)}
        for a, pr in zip(vals, probs):
            assert pr == pytest.approx(counts[int(a)] / params.n_neighbors, abs=1e-15)
    vals, probs = walk_axis_distribution(P22, 5)
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(probs, probs[::-1])  # symmetric


def test_rw_step_properties():
    rng = StreamRng(4, 0, TAG_BRW)
    steps = np.asarray([rw_step((0, 0), rng, P22) for _ in range(4000)])
    assert (np.abs(steps).max(axis=1) > 0).all()  # never zero displacement
    vals, probs = walk_axis_distribution(P22, 1)
    exact_var = float((probs * vals.astype(float) ** 2).sum())
    for axis in range(2):
        m = steps[:, axis].mean()
        v = steps[:, axis].var()
        se = math.sqrt(exact_var / len(steps))
        assert abs(m) < 4 * se
        assert abs(v - exact_var) < 0.2


def test_walk_box_exit_bound_and_vacuous():
    params = LatticeParams(2, 4)
    rep = walk_box_exit(params, n=50, K=0.5, trials=2000, master_seed=6)
    assert rep.vacuous  # 2d exp(-K^2/2) > 1
    rep3 = walk_box_exit(params, n=50, K=3.0, trials=2000, master_seed=6)
    assert not rep3.vacuous
    phats = [r.p_hat for r in rep3.rows]
    assert all(b.p_hat <= rep3.bound for b in rep3.rows)
    assert phats == sorted(phats)  # running exit estimate is monotone in k
    # per-axis martingale: empirical mean of final positions ~ 0
    # (covered by rw_step test; here check instantaneous <= running)
    for row in rep3.rows:
        assert row.hits_at_k <= row.hits_running


def test_range_tail_nesting_and_speed_bound():
    params = LatticeParams(2, 2)
    rep = range_tail(params, theta=1.0, n=4, r_grid=[1, 2, 4], trials=3000,
                     master_seed=99, c=2.0, K=2.0)
    phats = [row.p_hat for row in rep.rows]
    assert phats == sorted(phats, reverse=True)  # nonincreasing in r
    assert rep.rows[-1].p_hat == 0.0  # r = n: the walk cannot travel that far
    with pytest.raises(ValueError):
        range_tail(params, 1.0, 4, [5], 10, 1, c=2.0, K=2.0)  # r > K*sqrt(n)
    with pytest.raises(ValueError):
        range_tail(params, 1.0, 50, [1], 10, 1, c=2.0, K=2.0)  # n out of regime


def test_coupled_initial_state_equality():
    cs = initial_coupled_state(P22)
    assert cs.domination_holds()
    assert cs.pop.total == 1 and cs.eta_keys.size == 1
    assert cs.pop.count_at((0, 0)) == 1


def test_coupled_step_and_domination():
    p = 1.5 / P22.n_neighbors
    rng = StreamRng(21, 0, 3)
    cs = initial_coupled_state(P22)
    for _ in range(30):
        if cs.eta_keys.size == 0 or cs.pop.total > 5000:
            break
        cs = coupled_step(cs, rng, P22, p)  # raises on violation
        assert cs.eta_keys.size <= cs.pop.total


def test_coupled_trials_no_violations_and_range_subset():
    for R in (1, 2):
        params = LatticeParams(2, R)
        p = (1 + 1.0 / R) / params.n_neighbors
        for t in range(60):
            res = run_coupled_trial(5150, t, params, p, horizon=25, particle_cap=5000)
            for es, zs in zip(res.eta_sizes, res.z_totals):
                assert es <= zs
            # epidemic visited sites form a subset of envelope visited sites
            idx = np.searchsorted(res.z_visited, res.eta_visited)
            idx = np.minimum(idx, res.z_visited.size - 1)
            assert (res.z_visited[idx] == res.eta_visited).all()


def test_brw_batch_deterministic():
    p = 1.5 / P22.n_neighbors
    a = brw_batch(500, 6, P22, p, master_seed=10, track_range=True)
    b = brw_batch(500, 6, P22, p, master_seed=10, track_range=True)
    assert np.array_equal(a.totals, b.totals)
    assert np.array_equal(a.range_max, b.range_max)
    c = brw_batch(500, 6, P22, p, master_seed=11, track_range=True)
    assert not np.array_equal(a.totals, c.totals)
