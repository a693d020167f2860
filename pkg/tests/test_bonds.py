import math

import numpy as np
import pytest
from scipy import stats

from rangeperc.bonds import (
    BondOracle,
    StreamRng,
    bond,
    derive_seed,
    uniform01,
    uniform01_keys,
    uniform01_trials,
)
from rangeperc.epidemic import _mix_int, _pack_int
from rangeperc.lattice import LatticeParams, pack_coords

PARAMS = LatticeParams(2, 1)


def test_purity_and_symmetry():
    o = BondOracle(12345, 7, 0.4)
    u1 = uniform01(o, (2, 3), (3, 3), PARAMS)
    u2 = uniform01(o, (3, 3), (2, 3), PARAMS)
    assert u1 == u2
    assert u1 == uniform01(o, (2, 3), (3, 3), PARAMS)
    assert 0.0 <= u1 < 1.0


def test_p_limits():
    o0 = BondOracle(1, 0, 0.0)
    o1 = BondOracle(1, 0, 1.0)
    for y in [(1, 0), (0, 1), (1, 1), (-1, -1)]:
        assert bond(o0, (0, 0), y, PARAMS) is False
        assert bond(o1, (0, 0), y, PARAMS) is True


def test_monotone_threshold_coupling():
    lo = BondOracle(99, 3, 0.2)
    hi = lo.with_p(0.6)
    opened_lo = 0
    for i in range(-40, 40):
        if bond(lo, (i, 0), (i, 1), PARAMS):
            opened_lo += 1
            assert bond(hi, (i, 0), (i, 1), PARAMS)
    assert opened_lo > 0


def test_invalid_p_and_edges():
    with pytest.raises(ValueError):
        BondOracle(1, 0, 1.5)
    o = BondOracle(1, 0, 0.5)
    with pytest.raises(ValueError):
        uniform01(o, (0, 0), (0, 0), PARAMS)
    with pytest.raises(ValueError):
        uniform01(o, (0, 0), (5, 0), PARAMS)


def test_open_fraction_one_million_edges():
    # horizontal edges (i,j)-(i+1,j) over a 1000x1000 block, p = 0.3
    p = 0.3
    o = BondOracle(2718281828, 0, p)
    ii, jj = np.meshgrid(np.arange(1000), np.arange(1000), indexing="ij")
    base = np.column_stack([ii.ravel(), jj.ravel()])
    ka = pack_coords(base, 2)
    kb = pack_coords(base + np.asarray([1, 0]), 2)
    u = uniform01_keys(o, np.minimum(ka, kb), np.maximum(ka, kb))
    n = u.size
    frac = float((u < p).mean())
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(frac - p) < 4 * sigma


def test_uniform_ks():
    o = BondOracle(31337, 5, 0.5)
    base = np.arange(100_000, dtype=np.int64).reshape(-1, 1)
    coords = np.concatenate([base % 317, base // 317], axis=1)
    ka = pack_coords(coords, 2)
    kb = pack_coords(coords + np.asarray([0, 1]), 2)
    u = uniform01_keys(o, np.minimum(ka, kb), np.maximum(ka, kb))
    res = stats.kstest(u, "uniform")
    assert res.pvalue > 0.01


def test_adjacent_edge_independence_chi2():
    # bonds of the two edges (0,0)-(1,0) and (0,0)-(0,1) across many trials
    p = 0.4
    n = 40_000
    k00 = int(pack_coords(np.asarray([[0, 0]]), 2)[0])
    k10 = int(pack_coords(np.asarray([[1, 0]]), 2)[0])
    k01 = int(pack_coords(np.asarray([[0, 1]]), 2)[0])
    trials = np.arange(n)
    u1 = uniform01_trials(777, trials, np.full(n, min(k00, k10)), np.full(n, max(k00, k10)))
    u2 = uniform01_trials(777, trials, np.full(n, min(k00, k01)), np.full(n, max(k00, k01)))
    a, b = u1 < p, u2 < p
    table = np.asarray(
        [
            [(a & b).sum(), (a & ~b).sum()],
            [(~a & b).sum(), (~a & ~b).sum()],
        ]
    )
    res = stats.chi2_contingency(table)
    assert res.pvalue > 0.01


def test_scalar_bfs_hash_matches_vector_path():
    o = BondOracle(4242, 9, 0.5)
    from rangeperc.bonds import mix64, _u64

    base = int(mix64(mix64(_u64(o.master_seed)) ^ _u64(o.trial_index)))
    for x, y in [((0, 0), (1, 0)), ((3, -2), (2, -2)), ((-5, 7), (-5, 8))]:
        ka, kb = sorted((_pack_int(x, 2), _pack_int(y, 2)))
        h = _mix_int(_mix_int(base ^ ka) ^ kb)
        scalar_u = (h >> 11) * 2.0**-53
        assert scalar_u == uniform01(o, x, y, PARAMS)


def test_derive_seed_and_streams():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 2, 4)
    s1 = StreamRng(11, 0, 1)
    s2 = StreamRng(11, 0, 1)
    assert np.array_equal(s1.uniform(16), s2.uniform(16))
    s3 = StreamRng(11, 0, 2)
    assert not np.array_equal(StreamRng(11, 0, 1).uniform(16), s3.uniform(16))
    s4 = StreamRng(11, 1, 1)
    assert not np.array_equal(StreamRng(11, 0, 1).uniform(16), s4.uniform(16))
