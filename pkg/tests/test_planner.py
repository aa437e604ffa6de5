import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from occupation_mlis.errors import (DegenerateFit, HypothesisViolation, InvalidParams, InvalidRates,
                                    ScheduleExhausted)
from occupation_mlis.estimators import CostModel, ErrorBudget, LevelStats
from occupation_mlis.hjb import PdeCostModel, pde_work
from occupation_mlis.planner import (SCREEN_THRESHOLD, RateModel, VarianceProbe, WorkPlan,
                                     advantage_exists, band_bound, check_advantage_condition,
                                     condition_table, extrapolate_stats, fit_rate, l_opt, m_is,
                                     n_opt, optimal_coarse_level, optimize_mlis, optimize_slis,
                                     predict_slis_exponent, predict_work_exponent, prop1_oracle,
                                     sampling_work)


def budget(tol=0.1, q=2e-3):
    return ErrorBudget(tol, q, 0.02, 1.96)


def test_n_opt_example():
    c = n_opt(budget(), 20)
    assert c.raw == pytest.approx(200.0, rel=1e-15)
    assert (c.steps, c.rounded, c.level) == (200, 320, 4)


def test_n_opt_inverse_in_tol():
    assert n_opt(budget(0.05)).raw == pytest.approx(2 * n_opt(budget(0.1)).raw, rel=1e-15)


def test_l_opt():
    assert l_opt(640, 20) == 5
    assert l_opt(20, 20) == 0
    assert l_opt(21, 20) == 1
    assert l_opt(5, 20) == 0
    with pytest.raises(InvalidParams):
        l_opt(0, 20)


def test_m_is_and_sampling_work():
    b = budget()
    assert m_is(b, 1e-6) == pytest.approx((2 * 1.96 / (2e-3 * 0.1)) ** 2 * 1e-6, rel=1e-15)
    assert m_is(b, 0.0) == 0.0
    assert sampling_work(CostModel(), 1000, 200) == pytest.approx(1.3e-7 * 2e5, rel=1e-15)


def test_mlis_exponent_reference_example():
    e = predict_work_exponent(RateModel(1.0, 2.0, 1.0, 0.5, 0.3))
    assert e.exponent == pytest.approx(1.8, abs=1e-15) and not e.log_squared


def test_exponent_theorem_cases():
    e = predict_work_exponent(RateModel(1.0, 2.0, 1.0))
    assert (e.exponent, e.log_squared) == (2.0, False)
    e = predict_work_exponent(RateModel(1.0, 1.0, 1.0, 0.3, 0.3))
    assert (e.exponent, e.log_squared) == (2.0, True)
    e = predict_work_exponent(RateModel(1.0, 1.0, 1.0, 0.2, 0.5))
    assert e.exponent == pytest.approx(2.3) and not e.log_squared
    e = predict_work_exponent(RateModel(0.5, 1.0, 2.0))
    assert e.exponent == pytest.approx(2.0 + (2.0 - 1.0) / 0.5)


def test_slis_exponent():
    assert predict_slis_exponent(1.0, 0.0) == 3.0
    assert predict_slis_exponent(1.0, 0.8) == pytest.approx(2.2, abs=1e-15)
    with pytest.raises(InvalidRates):
        predict_slis_exponent(0.0, 0.5)


@given(st.floats(0.5, 2.0), st.floats(0.0, 1.0))
def test_slis_is_mlis_at_top_level(alpha, frac):
    # with the coarse level at L_opt: v0 = v_L, c0 = 1/alpha
    v_l = frac / alpha
    for beta, gamma in ((2.0, 1.0), (1.0, 1.0 + 0.5 * (1 - frac))):
        e = predict_work_exponent(RateModel(alpha, beta, gamma, v_l, 1.0 / alpha))
        assert e.exponent == pytest.approx(predict_slis_exponent(alpha, v_l), abs=1e-12)


@given(st.floats(0.1, 0.9), st.floats(0.0, 0.9), st.floats(0.5, 2.0))
def test_exponent_continuous_at_gamma_equals_beta(c0, v_frac, beta):
    v0 = v_frac * c0
    assume(v0 < c0)
    at = predict_work_exponent(RateModel(1.0, beta, beta, v0, c0)).exponent
    for h in (1e-7, -1e-7):
        near = predict_work_exponent(RateModel(1.0, beta, beta + h, v0, c0)).exponent
        assert near == pytest.approx(at, abs=1e-6)


def test_rate_model_validation():
    with pytest.raises(InvalidRates):
        RateModel(1.0, 1.0, 0.0)
    with pytest.raises(InvalidRates):
        RateModel(1.0, 1.0, 1.0, -0.1, 0.0)
    with pytest.raises(InvalidRates):
        RateModel(2.0, 1.0, 1.0, 0.0, 0.6)


def test_fit_rate_exact():
    f = fit_rate([(s, s ** -2.0) for s in (1, 2, 4, 8, 16)])
    assert f.slope == pytest.approx(-2.0) and f.r2 == pytest.approx(1.0)
    f = fit_rate([(s, 4.0 * s) for s in (1, 2, 4, 8)])
    assert f.slope == pytest.approx(1.0) and f.intercept == pytest.approx(2.0)


def test_fit_rate_noisy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = 2.0 ** np.arange(1, 9)
        v = s ** -0.76 * (1 + rng.uniform(-0.05, 0.05, s.size))
        f = fit_rate(list(zip(s, v)))
        assert abs(f.slope + 0.76) < 0.1
        assert f.n == 8 and f.halfwidth > 0


def test_fit_rate_degenerate():
    with pytest.raises(DegenerateFit):
        fit_rate([(1, 1), (2, 2)])
    with pytest.raises(DegenerateFit):
        fit_rate([(1, 1), (2, 0), (4, 1)])
    with pytest.raises(DegenerateFit):
        fit_rate([(2, 1), (2, 2), (2, 3)])


def test_condition_equal_variance():
    s = LevelStats.modeled([1.0, 1.0], [0.01])
    c = check_advantage_condition(s, 0)
    assert c.rhs == pytest.approx((math.sqrt(2) - 1) / math.sqrt(3))
    assert c.rhs == pytest.approx(0.2392, abs=1e-4)
    assert c.rhs ** 2 == pytest.approx(0.057, abs=1e-3)
    assert c.satisfied and c.screen_passed


def test_condition_half_variance_never_holds():
    s = LevelStats.modeled([1.0, 0.5, 0.25, 0.125], [1e-12] * 3)
    for ell in range(3):
        c = check_advantage_condition(s, ell)
        assert c.rhs == pytest.approx(0.0, abs=1e-15) and not c.satisfied
    assert optimal_coarse_level(s, 3) == 3
    assert not advantage_exists(s, 3)
    assert not prop1_oracle(s, 3)
    assert s.sampling_work(3, 3) <= min(s.sampling_work(l0, 3) for l0 in range(3))


def test_constant_variance_small_differences():
    s = LevelStats.modeled([1.0] * 5, [0.04] * 4)
    assert optimal_coarse_level(s, 4) == 0
    assert all(r["satisfied"] for r in condition_table(s))


def test_band_bound():
    assert band_bound(0.0) ** 2 == pytest.approx(SCREEN_THRESHOLD, rel=1e-14)
    assert band_bound(0.1) != band_bound(0.0)
    c = check_advantage_condition(LevelStats.modeled([1.0, 1.0], [0.01]), 0, eps=0.0)
    assert c.band_passed and c.band_bound == pytest.approx(math.sqrt(SCREEN_THRESHOLD))
    with pytest.raises(InvalidParams):
        band_bound(1.0)


def test_condition_from_level_one():
    # differences too big at level 1, small above
    s = LevelStats.modeled([1.0, 1.0, 1.0, 1.0], [0.5, 0.01, 0.01])
    holds = [check_advantage_condition(s, l).satisfied for l in range(3)]
    assert holds == [False, True, True]
    assert advantage_exists(s, 3) and prop1_oracle(s, 3)
    assert min(s.sampling_work(l0, 3) for l0 in range(3)) < s.sampling_work(3, 3)


def test_cost_pattern_enforced():
    s = LevelStats(20, [1.0, 1.0], [np.nan, 0.1], [1.0, 2.5], [np.nan, 3.0])
    with pytest.raises(HypothesisViolation):
        prop1_oracle(s, 1)
    with pytest.raises(HypothesisViolation):
        advantage_exists(s, 1)


log_u = st.floats(-7.0, 0.0)


@st.composite
def random_stats(draw):
    L = draw(st.integers(1, 6))
    v = [math.exp(draw(log_u)) for _ in range(L + 1)]
    d = [v[i + 1] * math.exp(draw(st.floats(-7.0, 0.7))) for i in range(L)]
    return LevelStats.modeled(v, d, c0=math.exp(draw(st.floats(-5, 2)))), L


@settings(max_examples=300)
@given(random_stats())
def test_coarse_level_is_brute_force_optimal(case):
    stats, L = case
    l0 = optimal_coarse_level(stats, L)
    works = [stats.sampling_work(k, L) for k in range(L + 1)]
    assert works[l0] <= min(works) * (1 + 1e-12)


@settings(max_examples=300)
@given(random_stats())
def test_condition_is_sufficient_for_a_gain(case):
    stats, L = case
    if advantage_exists(stats, L):
        assert prop1_oracle(stats, L)


def test_condition_is_not_necessary_for_a_gain():
    """Splitting lower down can pay off even when the condition fails at L - 1."""
    s = LevelStats.modeled([1.0, 1.41**2 / 2, 1.5**2 / 4], [0.1**2 / 3, 0.14**2 / 6], c0=1.0)
    assert not check_advantage_condition(s, 1).satisfied
    assert not advantage_exists(s, 2)
    assert s.sampling_work(0, 2) < s.sampling_work(2, 2)
    assert prop1_oracle(s, 2)


def test_literal_scan_can_differ_from_brute_force():
    rng = np.random.default_rng(3)
    differ = 0
    for _ in range(2000):
        L = int(rng.integers(2, 7))
        v = np.exp(rng.uniform(-7, 0, L + 1))
        s = LevelStats.modeled(v, v[1:] * np.exp(rng.uniform(-7, 0.7, L)))
        a, b = optimal_coarse_level(s, L), optimal_coarse_level(s, L, literal=True)
        assert s.sampling_work(a, L) <= s.sampling_work(b, L) * (1 + 1e-12)
        differ += a != b
    assert differ > 0


def test_optimize_slis_flat_variance_stops_early():
    plan = optimize_slis(budget(), [40, 80, 160, 320], lambda N, P: 1e-6)
    assert plan.p_opt == 40
    assert len(plan.trace) == 2
    assert plan.total_work == pytest.approx(plan.sampling_work + plan.pde_work)
    assert plan.n_opt == 200 and plan.eps_pde == 1 / 40


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-9, 1e-5), st.floats(1e-8, 1e-2), st.floats(0.01, 0.2))
def test_optimize_slis_matches_exhaustive_search(v_inf, kappa, tol):
    sched = [20, 40, 80, 160, 320, 640, 1280]
    b, cost, pde = budget(tol), CostModel(), PdeCostModel()
    N = n_opt(b).steps
    V = lambda N, P: v_inf + kappa / P
    total = {P: sampling_work(cost, m_is(b, V(N, P)), N) + pde_work(pde, P) for P in sched}
    plan = optimize_slis(b, sched, V, cost, pde)
    assert plan.p_opt == min(total, key=total.get) or plan.exhausted
    assert plan.total_work <= min(r["total"] for r in plan.trace)


def test_optimize_slis_exhausted():
    V = lambda N, P: 1.0 / P
    plan = optimize_slis(budget(), [40, 80], V)
    assert plan.exhausted and plan.p_opt == 80
    with pytest.raises(ScheduleExhausted) as info:
        optimize_slis(budget(), [40, 80], V, raise_exhausted=True)
    assert info.value.plan.p_opt == 80


def test_optimize_slis_runs_solve_once_at_the_end():
    calls = []
    optimize_slis(budget(), [40, 80, 160], lambda N, P: 1e-6 + 1e-3 / P, on_optimum=calls.append)
    assert len(calls) == 1


def _mlis_probe(v, d, c0=1.3e-7 * 20):
    return lambda P, L: LevelStats.modeled(v[:L + 1], d[:L], c0=c0)


def test_optimize_mlis_single_schedule_entry():
    b = budget()
    probe = _mlis_probe([1e-5] * 7, [1e-8] * 6)
    plan = optimize_mlis(b, 20, [80], probe)
    assert plan.p_opt == 80 and len(plan.trace) == 1
    rec = plan.trace[0]
    assert plan.total_work == rec["total"] and plan.l0_opt == rec["l0"] == 0
    assert plan.l_opt == 4 and plan.n_opt == 320
    assert plan.total_work == pytest.approx(plan.sampling_work + plan.pde_work)


def test_optimize_mlis_reduces_to_slis():
    b = budget()
    v = [1e-5 * 0.5 ** l for l in range(7)]
    probe = _mlis_probe(v, [1e-12] * 6)
    plan = optimize_mlis(b, 20, [40, 80, 160], probe)
    assert plan.l0_opt == plan.l_opt
    ref = optimize_slis(b, [40, 80, 160], lambda N, P: v[4], n_steps=320)
    assert plan.sampling_work == pytest.approx(ref.sampling_work, rel=1e-12)
    assert plan.m_levels == ref.m_levels


def test_work_plan_invariants():
    with pytest.raises(InvalidParams):
        WorkPlan("mlis", 0.1, 2e-3, 200, 320, 2, 3, 1.0, [2], 40, 1.0, 1.0, 2.0)
    plan = optimize_slis(budget(), [40, 80], lambda N, P: 1e-6)
    d = plan.to_dict()
    assert d["eps_pde"] == 1 / 40 and "trace" in d
    assert plan.summary_row()["total_work"] == plan.total_work


def test_variance_probe_extrapolates():
    calls = []

    def pilot(N, P):
        calls.append(P)
        return 1e-6 + 1e-3 / P

    probe = VarianceProbe(pilot, extrapolate_above=160)
    for P in (40, 80, 160):
        probe(200, P)
    v = probe(200, 320)
    assert calls == [40, 80, 160]
    assert 0 < v < probe(200, 160)
    assert probe.log[-1]["source"] == "extrapolated"
    assert probe(200, 80) == 1e-6 + 1e-3 / 80
    assert calls == [40, 80, 160]


def test_variance_probe_pilots_below_threshold():
    probe = VarianceProbe(lambda N, P: 1.0 / P, extrapolate_above=320)
    for P in (40, 80, 160, 320):
        probe(100, P)
    assert all(r["source"] == "pilot" for r in probe.log)


def test_extrapolate_stats_power_law():
    by_P = {P: LevelStats.modeled([1.0 / P, 2.0 / P], [0.5 / P]) for P in (40, 80, 160)}
    s = extrapolate_stats(by_P, 320)
    np.testing.assert_allclose(s.variance, [1 / 320, 2 / 320], rtol=1e-9)
    np.testing.assert_allclose(s.diff_variance[1:], [0.5 / 320], rtol=1e-9)
