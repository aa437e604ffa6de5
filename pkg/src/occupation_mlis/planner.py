"""Work planning: step and sample counts, HJB resolution and coarse-level choice.

Units: all work figures are modeled seconds (``C_SDE`` per path step,
``C_PDE P^3`` per HJB solve).  The HJB accuracy is indexed by the grid
resolution ``P``; ``eps_pde = 1 / P`` is reported alongside.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as sps

from .errors import DegenerateFit, HypothesisViolation, InvalidParams, InvalidRates, ScheduleExhausted
from .estimators import CostModel, ErrorBudget, LevelStats, mlmc_allocate
from .hjb import PdeCostModel, pde_work

DEFAULT_SCHEDULE = (40, 80, 160, 320, 640)
SCREEN_THRESHOLD = (math.sqrt(2.0) - 1.0) ** 2 / 3.0


@dataclass(frozen=True)
class StepChoice:
    """Time-step count for a bias budget.

    ``raw`` is the continuous formula, ``steps`` its ceiling and ``rounded``
    the next ``n0 2^k`` at or above ``steps``, reached at level ``level``.
    """

    raw: float
    steps: int
    rounded: int
    level: int


def _ceil(x: float) -> int:
    # absorb representation error, e.g. 200.00000000000003 -> 200
    return int(math.ceil(round(x, 9)))


def l_opt(n_steps: float, n0: int = 20) -> int:
    """Smallest ``L >= 0`` with ``n0 2^L >= N`` (bias-safe rounding up)."""
    if not (n_steps > 0 and n0 > 0):
        raise InvalidParams("N and N_0 must be positive")
    ratio = _ceil(n_steps) / n0
    if ratio <= 1:
        return 0
    return max(0, _ceil(math.log2(ratio)))


def n_opt(budget: ErrorBudget, n0: int = 20) -> StepChoice:
    """``N_opt = 2 C_b / (q_w TOL)`` with its integer and dyadic roundings."""
    raw = 2.0 * budget.c_b / (budget.q_w * budget.tol)
    level = l_opt(raw, n0)
    return StepChoice(raw, _ceil(raw), n0 * 2**level, level)


def m_is(budget: ErrorBudget, variance: float) -> float:
    """Sample count ``(2C / (q_w TOL))^2 V`` meeting the statistical half of the budget."""
    if variance < 0:
        raise InvalidParams("variance must be non-negative")
    return budget.sample_factor * variance


def sampling_work(cost: CostModel, m: float, n_steps: float) -> float:
    return cost.c_sde * m * n_steps


@dataclass
class WorkPlan:
    mode: str
    tol: float
    q_w: float
    n_opt_raw: float
    n_opt: int
    l_opt: int
    l0_opt: int
    m_is: float
    m_levels: List[int]
    p_opt: int
    sampling_work: float
    pde_work: float
    total_work: float
    slis_sampling_work: Optional[float] = None
    exhausted: bool = False
    trace: List[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.l_opt >= self.l0_opt >= 0:
            raise InvalidParams(f"need L_opt >= l0_opt >= 0, got {self.l_opt}, {self.l0_opt}")

    @property
    def eps_pde(self) -> float:
        return 1.0 / self.p_opt

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eps_pde"] = self.eps_pde
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def summary_row(self) -> dict:
        return {"mode": self.mode, "tol": self.tol, "n_opt": self.n_opt, "p_opt": self.p_opt,
                "l0_opt": self.l0_opt, "l_opt": self.l_opt, "sampling_work": self.sampling_work,
                "pde_work": self.pde_work, "total_work": self.total_work}


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    stderr: float
    halfwidth: float
    n: int


def fit_rate(points: Sequence[Tuple[float, float]], confidence: float = 0.95) -> RateFit:
    """OLS of ``log2(value)`` on ``log2(scale)``.

    ``halfwidth`` is the Student-t confidence half-width of the slope.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise DegenerateFit("need at least 3 (scale, value) pairs")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise DegenerateFit("scales and values must be positive and finite")
    x, y = np.log2(pts[:, 0]), np.log2(pts[:, 1])
    if np.ptp(x) == 0:
        raise DegenerateFit("all scales are equal")
    res = sps.linregress(x, y)
    n = x.size
    r2 = 1.0 if np.ptp(y) == 0 else float(res.rvalue**2)
    stderr = float(res.stderr) if n > 2 else math.inf
    half = float(sps.t.ppf(0.5 + confidence / 2, n - 2)) * stderr
    return RateFit(float(res.slope), float(res.intercept), r2, stderr, half, n)


class VarianceProbe:
    """``V^IS_N(P)`` from pilot runs, extrapolated in ``P`` where allowed.

    For a given ``N``, once at least three coarser resolutions have pilot
    values, a log-log fit of ``V`` against ``eps_pde = 1/P`` predicts finer
    ones.  ``extrapolate_above`` restricts extrapolation to ``P`` above that
    value (pilots are run up to it).
    """

    def __init__(self, pilot: Callable[[int, int], float], extrapolate_above: Optional[int] = None):
        self.pilot = pilot
        self.extrapolate_above = extrapolate_above
        self.measured: Dict[int, Dict[int, float]] = {}
        self.log: List[dict] = []

    def __call__(self, n_steps: int, P: int) -> float:
        known = self.measured.setdefault(n_steps, {})
        if P in known:
            return known[P]
        coarser = sorted(p for p in known if p < P)
        allowed = self.extrapolate_above is None or P > self.extrapolate_above
        if allowed and len(coarser) >= 3 and all(known[p] > 0 for p in coarser):
            fit = fit_rate([(1.0 / p, known[p]) for p in coarser])
            value = 2.0 ** (fit.intercept + fit.slope * math.log2(1.0 / P))
            self.log.append({"N": n_steps, "P": P, "value": value, "source": "extrapolated"})
            return value
        value = float(self.pilot(n_steps, P))
        known[P] = value
        self.log.append({"N": n_steps, "P": P, "value": value, "source": "pilot"})
        return value


def _extrapolate(values: Dict[int, float], P: int) -> float:
    pts = [(1.0 / p, v) for p, v in sorted(values.items()) if p < P]
    if len(pts) < 3:
        raise InvalidParams(f"need at least 3 coarser resolutions to extrapolate to P={P}")
    if any(v <= 0 for _, v in pts):
        return min(v for _, v in pts)
    fit = fit_rate(pts)
    return 2.0 ** (fit.intercept + fit.slope * math.log2(1.0 / P))


def extrapolate_stats(by_P: Dict[int, LevelStats], P: int) -> LevelStats:
    """Level statistics at resolution ``P`` fitted level by level from coarser ones."""
    coarser = {p: s for p, s in by_P.items() if p < P}
    if not coarser:
        raise InvalidParams("no coarser statistics to extrapolate from")
    n = min(s.variance.size for s in coarser.values())
    var = [_extrapolate({p: s.variance[l] for p, s in coarser.items()}, P) for l in range(n)]
    diff = [np.nan] + [_extrapolate({p: s.diff_variance[l] for p, s in coarser.items()}, P)
                       for l in range(1, n)]
    ref = next(iter(coarser.values())).truncated(n - 1)
    return replace(ref, variance=np.array(var), diff_variance=np.array(diff), mean=None,
                   diff_mean=None, wall=None)


def _descend(schedule, evaluate):
    """Walk the schedule while the total work strictly decreases.

    Returns the best record, the trace and whether the schedule ran out
    while still improving.
    """
    if len(schedule) == 0:
        raise InvalidParams("empty resolution schedule")
    best, trace = None, []
    for P in schedule:
        rec = evaluate(int(P))
        trace.append(rec)
        if best is None or rec["total"] < best["total"]:
            best = rec
        else:
            return best, trace, False
    return best, trace, True


def optimize_slis(budget: ErrorBudget, schedule: Sequence[int], variance_probe: Callable[[int, int], float],
                  cost: CostModel = CostModel(), pde_cost: PdeCostModel = PdeCostModel(),
                  n_steps: Optional[int] = None, n0: int = 20,
                  on_optimum: Optional[Callable[[int], object]] = None,
                  raise_exhausted: bool = False) -> WorkPlan:
    """Pick the HJB resolution minimizing sampling plus PDE work at fixed ``N_opt``.

    ``variance_probe(N, P)`` returns ``V^IS_N`` for a grid of resolution
    ``P``.  ``on_optimum(P_opt)`` is called once at the end (e.g. to run the
    actual solve).  ``n_steps`` defaults to the integer ``N_opt``.
    """
    choice = n_opt(budget, n0)
    N = choice.steps if n_steps is None else int(n_steps)

    def evaluate(P):
        v = variance_probe(N, P)
        m = m_is(budget, v)
        ws, wp = sampling_work(cost, m, N), pde_work(pde_cost, P)
        return {"P": P, "variance": v, "m": m, "sampling": ws, "pde": wp, "total": ws + wp}

    best, trace, exhausted = _descend(schedule, evaluate)
    plan = WorkPlan("slis", budget.tol, budget.q_w, choice.raw, N, l_opt(N, n0), l_opt(N, n0),
                    best["m"], [max(2, math.ceil(best["m"]))], best["P"], best["sampling"], best["pde"],
                    best["total"], exhausted=exhausted, trace=trace)
    if exhausted and raise_exhausted:
        raise ScheduleExhausted(plan)
    if on_optimum is not None:
        on_optimum(plan.p_opt)
    return plan


def work_condition(stats: LevelStats, ell: int) -> Tuple[bool, float, float]:
    """Splitting at ``ell`` beats starting at ``ell + 1``.

    ``sqrt(V_{l+1} C_{l+1}) > sqrt(V_l C_l) + sqrt(V_{l+1,l} C_{l+1,l})``; returns
    the verdict and both sides.
    """
    left = math.sqrt(stats.variance[ell + 1] * stats.cost[ell + 1])
    right = math.sqrt(stats.variance[ell] * stats.cost[ell]) + \
        math.sqrt(stats.diff_variance[ell + 1] * stats.pair_cost[ell + 1])
    return left > right, left, right


def optimal_coarse_level(stats: LevelStats, L: int, literal: bool = False) -> int:
    """Coarse level minimizing multilevel sampling work for finest level ``L``.

    By default every start ``l0 in 0..L`` is evaluated and the cheapest kept
    (ties go to the larger ``l0``, so no split is made without a strict
    gain).  ``literal=True`` instead runs the scan that sets ``l0 = l + 1``
    whenever the single-level option at ``l + 1`` is cheaper than splitting
    at ``l``, starting from 0.
    """
    stats._check_range(0, L)
    if literal:
        l0 = 0
        for ell in range(L):
            split_wins, left, right = work_condition(stats, ell)
            if left < right:
                l0 = ell + 1
        return l0
    works = [stats.sampling_work(l0, L) for l0 in range(L + 1)]
    best = min(works)
    tol = 1e-12 * max(best, 1e-300)
    return max(i for i, w in enumerate(works) if w <= best + tol)


@dataclass(frozen=True)
class AdvantageCheck:
    level: int
    lhs: float
    rhs: float
    satisfied: bool
    screen_ratio: float
    screen_passed: bool
    band_bound: Optional[float] = None
    band_lhs: Optional[float] = None
    band_passed: Optional[bool] = None


def band_bound(eps: float) -> float:
    """Threshold ``(sqrt(2(1+e)) - sqrt(1-e)) / sqrt(3(1-e^2))`` for nearly constant variance."""
    if not 0 <= eps < 1:
        raise InvalidParams("band width must lie in [0, 1)")
    return (math.sqrt(2 * (1 + eps)) - math.sqrt(1 - eps)) / math.sqrt(3 * (1 - eps**2))


def check_advantage_condition(stats: LevelStats, ell: int, eps: Optional[float] = None) -> AdvantageCheck:
    """``sqrt(V_{l+1,l} / V_l) < (sqrt(2 V_{l+1} / V_l) - 1) / sqrt(3)`` at level ``ell``.

    Also reports the screen ``V_{l+1,l} / V_0 < (sqrt(2) - 1)^2 / 3`` and, for
    a band width ``eps``, the nearly-constant-variance bound on
    ``sqrt(V_{l+1,l} / V_0)``.
    """
    stats._check_range(ell, ell + 1)
    v, v_next, v_diff = stats.variance[ell], stats.variance[ell + 1], stats.diff_variance[ell + 1]
    v0 = stats.variance[0]
    if v > 0:
        lhs = math.sqrt(v_diff / v)
        rhs = (math.sqrt(2.0 * v_next / v) - 1.0) / math.sqrt(3.0)
        satisfied = lhs < rhs
    else:
        # nothing left to reduce at this level
        lhs, rhs, satisfied = math.inf, -math.inf, False
    screen = v_diff / v0 if v0 > 0 else math.inf
    out = dict(level=ell, lhs=lhs, rhs=rhs, satisfied=satisfied,
               screen_ratio=screen, screen_passed=screen < SCREEN_THRESHOLD)
    if eps is not None:
        bound = band_bound(eps)
        band_lhs = math.sqrt(screen)
        out.update(band_bound=bound, band_lhs=band_lhs, band_passed=band_lhs < bound)
    return AdvantageCheck(**out)


def condition_table(stats: LevelStats, L: Optional[int] = None) -> List[dict]:
    """Rows ``(level, lhs, rhs, satisfied)`` for ``level = 0..L-1``."""
    L = stats.max_level if L is None else L
    rows = []
    for ell in range(L):
        c = check_advantage_condition(stats, ell)
        rows.append({"level": ell, "lhs": c.lhs, "rhs": c.rhs, "satisfied": c.satisfied})
    return rows


def _check_cost_pattern(stats: LevelStats, L: int):
    c0 = stats.cost[0]
    ell = np.arange(L + 1)
    want = c0 * 2.0**ell
    want_pair = 3.0 * c0 * 2.0 ** (ell[1:] - 1.0)
    if (np.any(np.abs(stats.cost[:L + 1] - want) > 1e-9 * want)
            or np.any(np.abs(stats.pair_cost[1:L + 1] - want_pair) > 1e-9 * want_pair)):
        raise HypothesisViolation("costs do not follow C_l = C_0 2^l, C_{l,l-1} = 3 C_0 2^(l-1)")


def advantage_exists(stats: LevelStats, L: int) -> bool:
    """Some ``l0 < L`` satisfies the advantage condition at every ``l in l0..L-1``."""
    _check_cost_pattern(stats, L)
    holds = [check_advantage_condition(stats, ell).satisfied for ell in range(L)]
    return any(all(holds[l0:]) for l0 in range(L))


def prop1_oracle(stats: LevelStats, L: int) -> bool:
    """Direct comparison: does the best multilevel start beat single level at ``L``?"""
    _check_cost_pattern(stats, L)
    single = stats.sampling_work(L, L)
    return any(stats.sampling_work(l0, L) < single for l0 in range(L))


def optimize_mlis(budget: ErrorBudget, n0: int, schedule: Sequence[int],
                  stats_probe: Callable[[int, int], LevelStats],
                  cost: CostModel = CostModel(), pde_cost: PdeCostModel = PdeCostModel(),
                  literal: bool = False, on_optimum: Optional[Callable[[int], object]] = None,
                  raise_exhausted: bool = False) -> WorkPlan:
    """Pick the HJB resolution minimizing multilevel sampling plus PDE work.

    ``stats_probe(P, L)`` returns level statistics for levels ``0..L`` at
    resolution ``P``, with costs in modeled seconds.  Per resolution: the
    single-level work at ``L_opt``, the best coarse level, and, if that
    level is below ``L_opt``, the multilevel work; otherwise the single-level
    work stands.
    """
    choice = n_opt(budget, n0)
    L = choice.level
    K = budget.sample_factor

    def evaluate(P):
        st = stats_probe(P, L)
        v_top = float(st.variance[L])
        ws_slis = sampling_work(cost, m_is(budget, v_top), choice.rounded)
        l0 = optimal_coarse_level(st, L, literal=literal)
        if l0 == L:
            ws = ws_slis
            counts = [max(2, math.ceil(m_is(budget, v_top)))]
        else:
            ws = st.sampling_work(l0, L, K)
            counts = [int(c) for c in mlmc_allocate(st, budget, l0, L)]
        wp = pde_work(pde_cost, P)
        return {"P": P, "l0": l0, "variance_top": v_top, "variance_l0": float(st.variance[l0]),
                "cost_l0": float(st.cost[l0]), "slis_sampling": ws_slis, "sampling": ws,
                "pde": wp, "total": ws + wp, "counts": counts}

    best, trace, exhausted = _descend(schedule, evaluate)
    plan = WorkPlan("mlis", budget.tol, budget.q_w, choice.raw, choice.rounded, L, best["l0"],
                    m_is(budget, best["variance_top"]), best["counts"], best["P"], best["sampling"],
                    best["pde"], best["total"], slis_sampling_work=best["slis_sampling"],
                    exhausted=exhausted, trace=trace)
    if exhausted and raise_exhausted:
        raise ScheduleExhausted(plan)
    if on_optimum is not None:
        on_optimum(plan.p_opt)
    return plan


@dataclass(frozen=True)
class RateModel:
    """Exponents: bias ``2^(-alpha l)``, difference variance ``2^(-beta l)``,
    pair cost ``2^(gamma l)``; coarse-level variance ``TOL^v0`` and cost ``TOL^(-c0)``."""

    alpha: float
    beta: float
    gamma: float
    v0: float = 0.0
    c0: float = 0.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.gamma > 0):
            raise InvalidRates("alpha, beta and gamma must be positive")
        if self.v0 < 0:
            raise InvalidRates("v0 must be non-negative")
        if not 0 <= self.c0 <= 1.0 / self.alpha + 1e-12:
            raise InvalidRates(f"c0 must lie in [0, 1/alpha], got {self.c0}")


@dataclass(frozen=True)
class WorkExponent:
    exponent: float
    log_squared: bool = False


def predict_work_exponent(rates: RateModel) -> WorkExponent:
    """Exponent ``r`` in multilevel sampling work ``O(TOL^-r)`` (times ``log^2`` if flagged)."""
    a, b, g, v0, c0 = rates.alpha, rates.beta, rates.gamma, rates.v0, rates.c0
    if g < b:
        return WorkExponent(2.0 - min(v0 - c0, (b - g) * c0))
    if g == b:
        if v0 - c0 >= 0:
            return WorkExponent(2.0, log_squared=True)
        return WorkExponent(2.0 - (v0 - c0))
    return WorkExponent(2.0 + max(c0 - v0, (g - b) / a))


def predict_slis_exponent(alpha: float, v_l: float) -> float:
    """Single-level IS work exponent ``2 + 1/alpha - v_L``."""
    if not (alpha > 0 and v_l >= 0):
        raise InvalidRates("need alpha > 0 and v_L >= 0")
    return 2.0 + 1.0 / alpha - v_l
