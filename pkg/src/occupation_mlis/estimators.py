"""Crude, importance-sampled and multilevel estimators of ``q_w = P(Z(T) > w)``.

Five variants share one report type:

* ``mc``        crude Monte Carlo at a single resolution
* ``slis``      single-level importance sampling with a grid control
* ``mlmc``      multilevel Monte Carlo (coupled pairs, no control)
* ``mlis-sll``  multilevel IS, each resolution with its own likelihood
* ``mlis-cl``   multilevel IS, coarse path under the fine path's measure

Work is reported twice: modeled (``C_SDE`` per path step, deterministic) and
measured wall-clock.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidParams
from .hjb import ZETA_MAX, ControlField, HjbGrid
from .paths import (DiscretizationLevel, OccupationProblem, PairBatch, PathBatch, RandomStream,
                    SdeModel, simulate_pairs_cl, simulate_pairs_sll, simulate_paths)

COUPLINGS = ("none", "sll", "cl")
VARIANTS = ("mc", "slis", "mlmc", "mlis-sll", "mlis-cl")

CSV_FIELDS = ("estimator", "tol", "n_steps", "l0", "L", "samples", "estimate", "variance",
              "level_means", "level_variances", "eps_b", "eps_s", "ci_halfwidth",
              "work_model", "work_wall", "seed")


@dataclass(frozen=True)
class CostModel:
    """Modeled sampling cost: ``c_sde`` seconds per path per time step."""

    c_sde: float = 1.3e-7

    def __post_init__(self):
        if not self.c_sde > 0:
            raise InvalidParams("C_SDE must be positive")

    def single(self, n_steps):
        return self.c_sde * n_steps

    def pair(self, n_fine):
        # fine plus coarse path: N + N/2 = 3 N_{l-1}
        return self.c_sde * 1.5 * n_fine


@dataclass(frozen=True)
class ErrorBudget:
    """Relative tolerance split evenly between bias and statistical error."""

    tol: float
    q_w: float
    c_b: float = 0.02
    confidence: float = 1.96

    def __post_init__(self):
        for name in ("tol", "q_w", "c_b", "confidence"):
            if not getattr(self, name) > 0:
                raise InvalidParams(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def sample_factor(self) -> float:
        """``(2C / (q_w TOL))^2``, the factor turning variance into sample count."""
        return (2.0 * self.confidence / (self.q_w * self.tol)) ** 2

    def error_split(self, n_steps, m, variance):
        return error_split(self, n_steps, m, variance)

    def satisfied(self, n_steps, m, variance) -> bool:
        eps_b, eps_s = error_split(self, n_steps, m, variance)
        return eps_b <= self.tol / 2 and eps_s <= self.tol / 2


def error_split(budget: ErrorBudget, n_steps, m, variance):
    """Relative bias ``C_b / (q_w N)`` and statistical error ``C sqrt(V) / (q_w sqrt(M))``."""
    if not (n_steps > 0 and m > 0 and variance >= 0):
        raise InvalidParams("N and M must be positive and V non-negative")
    eps_b = budget.c_b / (budget.q_w * n_steps)
    eps_s = budget.confidence * math.sqrt(variance) / (budget.q_w * math.sqrt(m))
    return eps_b, eps_s


@dataclass(frozen=True)
class LevelStats:
    """Per-level variances and costs for levels ``0..L`` with ``N_l = n0 2^l``.

    ``diff_variance[0]`` and ``pair_cost[0]`` have no meaning and hold NaN.
    """

    n0: int
    variance: np.ndarray
    diff_variance: np.ndarray
    cost: np.ndarray
    pair_cost: np.ndarray
    pilot_m: int = 0
    coupling: str = "none"
    mean: Optional[np.ndarray] = field(default=None, compare=False)
    diff_mean: Optional[np.ndarray] = field(default=None, compare=False)
    wall: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        arrays = {}
        for name in ("variance", "diff_variance", "cost", "pair_cost"):
            arr = np.asarray(getattr(self, name), dtype=float).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            arrays[name] = arr
        n = arrays["variance"].size
        if n == 0 or any(a.size != n for a in arrays.values()):
            raise InvalidParams("level arrays must be non-empty and of equal length")
        if np.any(arrays["variance"] < 0) or np.any(arrays["diff_variance"][1:] < 0):
            raise InvalidParams("variances must be non-negative")
        if np.any(arrays["cost"] <= 0) or np.any(arrays["pair_cost"][1:] <= 0):
            raise InvalidParams("costs must be positive")
        if self.coupling not in COUPLINGS:
            raise InvalidParams(f"unknown coupling {self.coupling!r}")

    @classmethod
    def modeled(cls, variance, diff_variance, c0: float = 1.0, n0: int = 20, **kw) -> "LevelStats":
        """Stats with the cost pattern ``C_l = c0 2^l`` and ``C_{l,l-1} = 3 c0 2^(l-1)``."""
        variance = np.asarray(variance, dtype=float)
        diff = np.asarray(diff_variance, dtype=float)
        if diff.size == variance.size - 1:
            diff = np.concatenate([[np.nan], diff])
        ell = np.arange(variance.size)
        pair = 3.0 * c0 * 2.0 ** (ell - 1.0)
        pair[0] = np.nan
        return cls(n0, variance, diff, c0 * 2.0**ell, pair, **kw)

    @property
    def max_level(self) -> int:
        return self.variance.size - 1

    def steps(self, level: int) -> int:
        return self.n0 * 2**level

    def sampling_work(self, l0: int, L: int, factor: float = 1.0) -> float:
        """``factor * (sqrt(V_l0 C_l0) + sum_{l0<l<=L} sqrt(V_{l,l-1} C_{l,l-1}))^2``."""
        self._check_range(l0, L)
        s = math.sqrt(self.variance[l0] * self.cost[l0])
        s += float(np.sum(np.sqrt(self.diff_variance[l0 + 1:L + 1] * self.pair_cost[l0 + 1:L + 1])))
        return factor * s * s

    def truncated(self, L: int) -> "LevelStats":
        keep = slice(0, L + 1)
        opt = {k: (None if getattr(self, k) is None else getattr(self, k)[keep])
               for k in ("mean", "diff_mean", "wall")}
        return replace(self, variance=self.variance[keep], diff_variance=self.diff_variance[keep],
                       cost=self.cost[keep], pair_cost=self.pair_cost[keep], **opt)

    def _check_range(self, l0, L):
        if not 0 <= l0 <= L <= self.max_level:
            raise InvalidParams(f"need 0 <= l0 <= L <= {self.max_level}, got l0={l0}, L={L}")


@dataclass
class EstimatorReport:
    estimator: str
    estimate: float
    n_steps: tuple
    samples: tuple
    level_means: tuple
    level_variances: tuple
    work_model: float
    work_wall: float
    seed: int
    confidence: float = 1.96
    l0: int = 0
    L: int = 0
    tol: Optional[float] = None
    eps_b: Optional[float] = None
    eps_s: Optional[float] = None

    @property
    def variance(self) -> float:
        """Variance of the estimator, ``sum_l V_l / M_l`` over independent levels."""
        return float(sum(v / m for v, m in zip(self.level_variances, self.samples)))

    @property
    def sample_variance(self) -> float:
        """Per-sample variance of a single-level estimator."""
        if len(self.samples) != 1:
            raise ValueError("per-sample variance is only defined for single-level estimators")
        return float(self.level_variances[0])

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance)

    @property
    def ci_halfwidth(self) -> float:
        """Relative confidence half-width ``C sqrt(var) / estimate``."""
        if self.estimate > 0:
            return self.confidence * self.std_error / self.estimate
        return math.inf

    def with_budget(self, budget: ErrorBudget) -> "EstimatorReport":
        """Attach ``TOL`` and the bias/statistical error split of this run."""
        eps_b = budget.c_b / (budget.q_w * self.n_steps[-1])
        eps_s = budget.confidence * self.std_error / budget.q_w
        return replace(self, tol=budget.tol, eps_b=eps_b, eps_s=eps_s)

    def row(self) -> dict:
        def join(xs, fmt="{}"):
            return ";".join(fmt.format(x) for x in xs)

        def opt(x):
            return "" if x is None else repr(float(x))

        return {
            "estimator": self.estimator,
            "tol": opt(self.tol),
            "n_steps": join(self.n_steps),
            "l0": self.l0,
            "L": self.L,
            "samples": join(self.samples),
            "estimate": repr(float(self.estimate)),
            "variance": repr(self.variance),
            "level_means": join(self.level_means, "{!r}"),
            "level_variances": join(self.level_variances, "{!r}"),
            "eps_b": opt(self.eps_b),
            "eps_s": opt(self.eps_s),
            "ci_halfwidth": repr(self.ci_halfwidth),
            "work_model": repr(float(self.work_model)),
            "work_wall": repr(float(self.work_wall)),
            "seed": self.seed,
        }


def _concat(parts):
    """Concatenate batches of one dataclass type field by field."""
    first = parts[0]
    out = {}
    for f in fields(first):
        vals = [getattr(p, f.name) for p in parts]
        if isinstance(vals[0], np.ndarray):
            out[f.name] = np.concatenate(vals)
        else:
            out[f.name] = vals[0]
    return type(first)(**out)


def _run(fn, m: int, workers: int):
    """Evaluate ``fn(indices)`` for path indices ``0..m-1``, split across threads.

    Paths own their random streams, so the split does not change any sample.
    """
    indices = np.arange(m, dtype=np.int64)
    if workers <= 1 or m < 2 * workers:
        return fn(indices)
    chunks = np.array_split(indices, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(fn, chunks))
    return _concat(parts)


def _mean_var(y: np.ndarray):
    return float(np.mean(y)), float(np.var(y, ddof=1))


def resolve_control(model: SdeModel, prob: OccupationProblem, grid_or_control, zeta_max: float = ZETA_MAX):
    """Turn a solved grid into a control field, checking it was solved for ``prob``."""
    if grid_or_control is None or not isinstance(grid_or_control, HjbGrid):
        return grid_or_control
    g = grid_or_control
    same = (math.isclose(g.horizon, prob.horizon) and math.isclose(g.w, prob.w)
            and math.isclose(g.gamma_th, prob.gamma_th) and g.smoothing == prob.smoothing)
    if not same:
        raise InvalidParams("grid was solved for a different problem (T, w, threshold or smoothing)")
    return ControlField(g, model, zeta_max)


def _single_level(name, model, prob, n_steps, m, control, stream, cost, workers):
    if m < 2:
        raise InvalidParams(f"need at least 2 samples, got {m}")
    level = DiscretizationLevel(int(n_steps), prob.horizon)
    start = time.perf_counter()
    batch = _run(lambda idx: simulate_paths(model, prob, level, control, stream, idx), m, workers)
    wall = time.perf_counter() - start
    mean, var = _mean_var(batch.payoff)
    return EstimatorReport(name, mean, (level.n_steps,), (m,), (mean,), (var,),
                           m * cost.single(level.n_steps), wall, stream.seed)


def crude_mc(model: SdeModel, prob: OccupationProblem, n_steps: int, m: int, stream: RandomStream,
             cost: CostModel = CostModel(), workers: int = 1) -> EstimatorReport:
    """Sample mean of ``g_w(Z_N)`` over ``m`` uncontrolled paths."""
    return _single_level("mc", model, prob, n_steps, m, None, stream, cost, workers)


def slis(model: SdeModel, prob: OccupationProblem, n_steps: int, m: int, grid, stream: RandomStream,
         cost: CostModel = CostModel(), workers: int = 1, zeta_max: float = ZETA_MAX) -> EstimatorReport:
    """Importance-sampled estimator with the control read off ``grid``.

    ``grid`` may also be a ready control callable ``(t, x, z) -> zeta``.
    """
    control = resolve_control(model, prob, grid, zeta_max)
    if control is None:
        raise InvalidParams("slis needs a grid or a control")
    return _single_level("slis", model, prob, n_steps, m, control, stream, cost, workers)


def _pairs(model, prob, fine, control, coupling, stream, indices) -> PairBatch:
    if coupling == "cl":
        return simulate_pairs_cl(model, prob, fine, control, stream, indices)
    return simulate_pairs_sll(model, prob, fine, control, stream, indices)


def _check_coupling(coupling, control):
    if coupling not in COUPLINGS:
        raise InvalidParams(f"coupling must be one of {COUPLINGS}, got {coupling!r}")
    if coupling == "none" and control is not None:
        raise InvalidParams("coupling 'none' is the uncontrolled MLMC pilot; pass no control")
    if coupling != "none" and control is None:
        raise InvalidParams(f"coupling {coupling!r} needs a grid or a control")


def estimate_level_stats(model: SdeModel, prob: OccupationProblem, grid, coupling: str,
                         n0: int, max_level: int, pilot_m: int, stream: RandomStream,
                         cost: CostModel = CostModel(), workers: int = 1,
                         zeta_max: float = ZETA_MAX) -> LevelStats:
    """Pilot estimates of ``V_l`` and ``V_{l,l-1}`` for levels ``0..max_level``.

    Level 0 uses single paths; level ``l >= 1`` uses coupled pairs whose fine
    member doubles as a single-level sample at ``l``.  Level ``l`` draws from
    substream ``l`` of ``stream``.  Costs follow the model
    ``C_l = C_SDE N_0 2^l``, ``C_{l,l-1} = 3 C_SDE N_0 2^(l-1)``.
    """
    if pilot_m < 1000:
        raise InvalidParams(f"pilot sample size must be at least 1000, got {pilot_m}")
    control = resolve_control(model, prob, grid, zeta_max)
    _check_coupling(coupling, control)
    n_lev = max_level + 1
    var, mean = np.empty(n_lev), np.empty(n_lev)
    dvar, dmean = np.full(n_lev, np.nan), np.full(n_lev, np.nan)
    wall = np.empty(n_lev)
    for ell in range(n_lev):
        sub = stream.substream(ell)
        level = DiscretizationLevel.from_level(ell, n0, prob.horizon)
        start = time.perf_counter()
        if ell == 0:
            b = _run(lambda idx: simulate_paths(model, prob, level, control, sub, idx), pilot_m, workers)
            mean[0], var[0] = _mean_var(b.payoff)
        else:
            p = _run(lambda idx: _pairs(model, prob, level, control, coupling, sub, idx), pilot_m, workers)
            mean[ell], var[ell] = _mean_var(p.fine_payoff)
            dmean[ell], dvar[ell] = _mean_var(p.difference)
        wall[ell] = time.perf_counter() - start
    c0 = cost.single(n0)
    stats = LevelStats.modeled(var, dvar, c0=c0, n0=n0, pilot_m=pilot_m, coupling=coupling)
    return replace(stats, mean=mean, diff_mean=dmean, wall=wall)


def mlmc_allocate(stats: LevelStats, budget: ErrorBudget, l0: int, L: int) -> np.ndarray:
    """Optimal sample counts for levels ``l0..L`` (level ``l0`` as the base).

    ``M_l = K sqrt(V_l / C_l) S`` with ``K = (2C / (q_w TOL))^2`` and
    ``S = sqrt(V_l0 C_l0) + sum sqrt(V_{l,l-1} C_{l,l-1})``; rounded up, at least 2.
    """
    stats._check_range(l0, L)
    v = np.concatenate([[stats.variance[l0]], stats.diff_variance[l0 + 1:L + 1]])
    c = np.concatenate([[stats.cost[l0]], stats.pair_cost[l0 + 1:L + 1]])
    s = float(np.sum(np.sqrt(v * c)))
    m = budget.sample_factor * np.sqrt(v / c) * s
    return np.maximum(np.ceil(m), 2).astype(np.int64)


def multilevel_estimate(model: SdeModel, prob: OccupationProblem, grid, coupling: str,
                        l0: int, L: int, counts: Sequence[int], n0: int, stream: RandomStream,
                        cost: CostModel = CostModel(), workers: int = 1,
                        zeta_max: float = ZETA_MAX) -> EstimatorReport:
    """Telescoping estimator: base mean at ``l0`` plus mean level differences up to ``L``.

    ``counts[i]`` is the sample count at level ``l0 + i``; level ``l`` draws
    from substream ``l`` of ``stream``.
    """
    control = resolve_control(model, prob, grid, zeta_max)
    _check_coupling(coupling, control)
    counts = [int(c) for c in counts]
    if not 0 <= l0 <= L or len(counts) != L - l0 + 1:
        raise InvalidParams(f"need {L - l0 + 1} sample counts for levels {l0}..{L}")
    if any(c < 2 for c in counts):
        raise InvalidParams("every level needs at least 2 samples")
    means, variances, steps = [], [], []
    work = 0.0
    start = time.perf_counter()
    for i, ell in enumerate(range(l0, L + 1)):
        sub = stream.substream(ell)
        level = DiscretizationLevel.from_level(ell, n0, prob.horizon)
        steps.append(level.n_steps)
        if i == 0:
            b = _run(lambda idx: simulate_paths(model, prob, level, control, sub, idx), counts[i], workers)
            y = b.payoff
            work += counts[i] * cost.single(level.n_steps)
        else:
            p = _run(lambda idx: _pairs(model, prob, level, control, coupling, sub, idx), counts[i], workers)
            y = p.difference
            work += counts[i] * cost.pair(level.n_steps)
        mu, var = _mean_var(y)
        means.append(mu)
        variances.append(var)
    wall = time.perf_counter() - start
    name = {"none": "mlmc", "sll": "mlis-sll", "cl": "mlis-cl"}[coupling]
    estimate = float(math.fsum(means))
    return EstimatorReport(name, estimate, tuple(steps), tuple(counts), tuple(means), tuple(variances),
                           work, wall, stream.seed, l0=l0, L=L)
