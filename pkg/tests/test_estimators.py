import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import linear_model
from occupation_mlis.errors import InvalidParams
from occupation_mlis.estimators import (CSV_FIELDS, CostModel, ErrorBudget, LevelStats, crude_mc,
                                        error_split, estimate_level_stats, mlmc_allocate,
                                        multilevel_estimate, slis)
from occupation_mlis.hjb import HjbGrid
from occupation_mlis.paths import (DiscretizationLevel, OccupationProblem, RandomStream,
                                   simulate_pairs_sll)
from occupation_mlis.smoothing import SmoothingParams


def budget(tol=0.1, q=2e-3):
    return ErrorBudget(tol, q, 0.02, 1.96)


def unit_grid(prob, P=8):
    return HjbGrid(np.ones((P + 1,) * 3), prob.horizon, 0.0, 11.0, prob.w, prob.gamma_th, prob.smoothing)


def test_error_split_examples():
    eps_b, eps_s = error_split(budget(), 200, 100, 0.0)
    assert eps_b == pytest.approx(0.05, rel=1e-15)
    assert eps_s == 0.0
    _, a = error_split(budget(), 200, 100, 1e-5)
    _, b = error_split(budget(), 200, 400, 1e-5)
    assert b == pytest.approx(a / 2, rel=1e-15)
    with pytest.raises(InvalidParams):
        error_split(budget(), 0, 1, 1.0)


def test_budget_satisfied():
    b = budget()
    assert b.satisfied(400, 10**9, 1e-6)
    assert not b.satisfied(100, 10**9, 1e-6)
    with pytest.raises(InvalidParams):
        ErrorBudget(0.0, 1e-3)


def test_crude_always_exceeds():
    prob = OccupationProblem(5.0, 0.25, 3.0)
    m = linear_model(h=lambda x: np.full(x.shape[0], -1.0))
    r = crude_mc(m, prob, 64, 100, RandomStream(0))
    assert r.estimate == 1.0 and r.sample_variance == 0.0


def test_crude_never_exceeds():
    prob = OccupationProblem(5.0, 0.25, 3.0)
    m = linear_model(h=lambda x: np.full(x.shape[0], 1.0))
    r = crude_mc(m, prob, 64, 100, RandomStream(0))
    assert r.estimate == 0.0 and r.variance == 0.0
    assert r.ci_halfwidth == math.inf


def test_crude_needs_two_samples(model, sharp):
    with pytest.raises(InvalidParams):
        crude_mc(model, sharp, 20, 1, RandomStream(0))


def test_workers_do_not_change_results(model, sharp):
    a = crude_mc(model, sharp, 40, 4000, RandomStream(5), workers=1)
    b = crude_mc(model, sharp, 40, 4000, RandomStream(5), workers=4)
    assert a.estimate == b.estimate and a.level_variances == b.level_variances


def test_report_fields(model, smooth):
    r = crude_mc(model, smooth, 40, 500, RandomStream(1)).with_budget(budget())
    row = r.row()
    assert tuple(row) == CSV_FIELDS
    assert r.ci_halfwidth == pytest.approx(1.96 * math.sqrt(r.sample_variance / 500) / r.estimate)
    assert r.eps_b == pytest.approx(0.02 / (2e-3 * 40))
    assert r.work_model == pytest.approx(500 * 40 * 1.3e-7)


def test_slis_with_unit_grid_matches_crude(model, sharp):
    a = crude_mc(model, sharp, 40, 2000, RandomStream(3))
    b = slis(model, sharp, 40, 2000, unit_grid(sharp), RandomStream(3))
    assert a.estimate == b.estimate and a.level_variances == b.level_variances
    assert b.estimator == "slis"


def test_slis_rejects_foreign_grid(model, sharp, smooth):
    with pytest.raises(InvalidParams):
        slis(model, sharp, 40, 100, unit_grid(smooth), RandomStream(3))
    with pytest.raises(InvalidParams):
        slis(model, sharp, 40, 100, None, RandomStream(3))


def test_slis_agrees_with_crude(model, smooth, grids):
    M = 10**5
    a = crude_mc(model, smooth, 64, M, RandomStream(7), workers=4)
    b = slis(model, smooth, 64, M, grids.get(40, smooth), RandomStream(8), workers=4)
    assert abs(a.estimate - b.estimate) <= 3 * math.sqrt(a.variance + b.variance)
    assert b.sample_variance < a.sample_variance


def test_level_stats_pilot_minimum(model, sharp):
    with pytest.raises(InvalidParams):
        estimate_level_stats(model, sharp, None, "none", 20, 2, 999, RandomStream(0))


def test_level_stats_deterministic_model():
    prob = OccupationProblem(1.0, 0.3, 0.5, SmoothingParams(0.2, 0.1))
    m = linear_model(drift=(0.5,), sigma=0.0)
    st_ = estimate_level_stats(m, prob, None, "none", 4, 3, 1000, RandomStream(0))
    np.testing.assert_array_equal(st_.variance, 0.0)
    np.testing.assert_array_equal(st_.diff_variance[1:], 0.0)
    assert st_.coupling == "none"


def test_level_stats_none_reproduces_mlmc_pilot(model, smooth):
    s = RandomStream(11)
    st_ = estimate_level_stats(model, smooth, None, "none", 10, 2, 1000, s)
    for ell in (1, 2):
        p = simulate_pairs_sll(model, smooth, DiscretizationLevel.from_level(ell, 10, 5.0), None,
                               s.substream(ell), range(1000))
        assert st_.diff_variance[ell] == pytest.approx(np.var(p.difference, ddof=1), rel=1e-12)
        assert st_.variance[ell] == pytest.approx(np.var(p.fine_payoff, ddof=1), rel=1e-12)
    np.testing.assert_allclose(st_.cost, 1.3e-7 * 10 * 2.0 ** np.arange(3))
    np.testing.assert_allclose(st_.pair_cost[1:], 3 * 1.3e-7 * 10 * 2.0 ** np.arange(2))


def test_level_stats_coupling_checks(model, smooth, grids):
    g = grids.get(40, smooth)
    with pytest.raises(InvalidParams):
        estimate_level_stats(model, smooth, g, "none", 20, 1, 1000, RandomStream(0))
    with pytest.raises(InvalidParams):
        estimate_level_stats(model, smooth, None, "cl", 20, 1, 1000, RandomStream(0))
    with pytest.raises(InvalidParams):
        estimate_level_stats(model, smooth, g, "bogus", 20, 1, 1000, RandomStream(0))


def test_allocation_hand_value():
    stats = LevelStats.modeled([1.0, 1.0], [0.25], c0=1.0)
    b = budget()
    K = b.sample_factor
    m = mlmc_allocate(stats, b, 0, 1)
    assert m[0] == math.ceil(K * (1 + math.sqrt(0.75)))
    assert m[1] == math.ceil(K * math.sqrt(0.25 / 3) * (1 + math.sqrt(0.75)))
    assert m[0] / K == pytest.approx(1.866, abs=1e-3)


def test_allocation_single_level_is_m_is():
    stats = LevelStats.modeled([3e-6, 2e-6, 1e-6], [1e-7, 1e-8], c0=2.6e-6)
    b = budget()
    assert mlmc_allocate(stats, b, 2, 2)[0] == math.ceil(b.sample_factor * 1e-6)


def test_allocation_homogeneous_in_variance():
    v, dv = np.array([1e-3, 9e-4, 8e-4]), np.array([2e-4, 5e-5])
    b = budget(0.05)
    m1 = mlmc_allocate(LevelStats.modeled(v, dv), b, 0, 2)
    m4 = mlmc_allocate(LevelStats.modeled(4 * v, 4 * dv), b, 0, 2)
    np.testing.assert_allclose(m4 / m1, 4.0, rtol=1e-4)


@settings(max_examples=200)
@given(st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=6), st.integers(0, 5), st.sampled_from([0.8, 1.2]))
def test_allocation_first_order_optimal(vs, which, factor):
    stats = LevelStats.modeled(vs, vs[1:], c0=1.0)
    L = len(vs) - 1
    m = mlmc_allocate(stats, budget(0.01), 0, L).astype(float)
    v = np.concatenate([[vs[0]], vs[1:]])
    c = np.concatenate([[stats.cost[0]], stats.pair_cost[1:]])
    target = np.sum(v / m)
    work = np.sum(m * c)
    p = m.copy()
    p[which % v.size] *= factor
    p *= np.sum(v / p) / target  # restore the statistical-error constraint
    assert np.sum(p * c) >= 0.99 * work


def test_variance_additivity(model, smooth):
    r = multilevel_estimate(model, smooth, None, "none", 0, 2, [400, 200, 100], 10, RandomStream(4))
    assert r.variance == pytest.approx(sum(v / m for v, m in zip(r.level_variances, r.samples)))
    assert r.estimate == pytest.approx(sum(r.level_means))
    assert r.estimator == "mlmc" and r.n_steps == (10, 20, 40)
    assert r.work_model == pytest.approx(1.3e-7 * (400 * 10 + 200 * 30 + 100 * 60))


def test_multilevel_single_level_matches_slis(model, smooth, grids):
    g = grids.get(40, smooth)
    s = RandomStream(12)
    r = multilevel_estimate(model, smooth, g, "cl", 2, 2, [500], 10, s)
    ref = slis(model, smooth, 40, 500, g, s.substream(2))
    assert r.estimate == ref.estimate
    r0 = multilevel_estimate(model, smooth, None, "none", 1, 1, [500], 10, s)
    assert r0.estimate == crude_mc(model, smooth, 20, 500, s.substream(1)).estimate


def test_multilevel_deterministic_model():
    prob = OccupationProblem(1.0, 0.3, 0.5, SmoothingParams(0.2, 0.1))
    m = linear_model(drift=(0.5,), sigma=0.0)
    r = multilevel_estimate(m, prob, None, "none", 0, 3, [5, 5, 5, 5], 4, RandomStream(0))
    fine = crude_mc(m, prob, 32, 5, RandomStream(0))
    assert r.estimate == pytest.approx(fine.estimate, abs=1e-15)
    assert all(v == 0 for v in r.level_variances)


def test_multilevel_validation(model, smooth):
    with pytest.raises(InvalidParams):
        multilevel_estimate(model, smooth, None, "none", 0, 2, [10, 10], 10, RandomStream(0))
    with pytest.raises(InvalidParams):
        multilevel_estimate(model, smooth, None, "none", 0, 1, [10, 1], 10, RandomStream(0))


def test_level_stats_validation():
    with pytest.raises(InvalidParams):
        LevelStats.modeled([-1.0, 1.0], [0.1])
    with pytest.raises(InvalidParams):
        LevelStats(20, [1.0], [np.nan], [0.0], [np.nan])
    s = LevelStats.modeled([1.0, 0.5, 0.25], [0.1, 0.05], c0=2.0)
    assert s.max_level == 2 and s.steps(2) == 80
    assert s.truncated(1).max_level == 1
    with pytest.raises(ValueError):
        s.variance[0] = 3.0
    assert s.sampling_work(2, 2) == pytest.approx(0.25 * 8.0)


def test_cost_model():
    c = CostModel()
    assert c.single(100) == pytest.approx(1.3e-5)
    assert c.pair(40) == pytest.approx(3 * 1.3e-7 * 20)


@pytest.mark.slow
def test_crude_rice_tail_probability(model, sharp):
    r = crude_mc(model, sharp, 256, 10**6, RandomStream(20240601), workers=8)
    assert abs(r.estimate - 2e-3) <= 3 * r.std_error
