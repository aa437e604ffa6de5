"""Euler-Maruyama simulation of the state and its occupation time.

Every path is driven by its own counter-based Philox stream, keyed by
``(seed, stream_id)`` and positioned by the path index, so a path can be
regenerated bit-exactly in isolation or inside any batch.

All simulators are vectorized over a batch of paths: model callables receive
states of shape ``(B, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidParams, NonFiniteState
from .smoothing import SmoothingParams, f_smooth, g_smooth

# control(t, x[B, d], z[B]) -> [B, d]
Control = Callable[[float, np.ndarray, np.ndarray], np.ndarray]

DEFAULT_BATCH = 8192


@dataclass(frozen=True)
class SdeModel:
    """Drift/diffusion/observable bundle for ``dX = a dt + b dW``.

    ``drift(t, x)`` maps ``(B, d)`` to ``(B, d)``, ``diffusion(t, x)`` maps
    ``(B, d)`` to ``(B, d, d)``, ``observable(x)`` maps ``(B, d)`` to ``(B,)``
    and ``observable_grad(x)`` maps ``(B, d)`` to ``(B, d)``.
    """

    dimension: int
    drift: Callable[[float, np.ndarray], np.ndarray]
    diffusion: Callable[[float, np.ndarray], np.ndarray]
    observable: Callable[[np.ndarray], np.ndarray]
    observable_grad: Callable[[np.ndarray], np.ndarray]
    x0: np.ndarray

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if self.dimension < 1 or x0.shape != (self.dimension,):
            raise InvalidParams(f"x0 must have shape ({self.dimension},), got {x0.shape}")
        object.__setattr__(self, "x0", x0)


@dataclass(frozen=True)
class OccupationProblem:
    """Target ``P(Z(T) > w)`` where ``Z`` is the time ``h(X)`` spends below ``gamma_th``.

    With ``smoothing`` set, both indicators are replaced by their ramps and
    the target becomes the smoothed quantity.
    """

    horizon: float
    gamma_th: float
    w: float
    smoothing: Optional[SmoothingParams] = None

    def __post_init__(self):
        if not (0.0 < self.w < self.horizon):
            raise InvalidParams(f"need 0 < w < T, got w={self.w}, T={self.horizon}")
        if not np.isfinite(self.gamma_th):
            raise InvalidParams("gamma_th must be finite")

    @property
    def smoothed(self) -> bool:
        return self.smoothing is not None

    def occupation_rate(self, hx):
        """``f(h(x))``: the indicator (or ramp) of being below threshold."""
        if self.smoothing is None:
            return (np.asarray(hx) < self.gamma_th).astype(float)
        return f_smooth(hx, self.gamma_th, self.smoothing.d)

    def payoff(self, z):
        """``g_w(z)``: the tail indicator (or ramp)."""
        if self.smoothing is None:
            return (np.asarray(z) > self.w).astype(float)
        return g_smooth(z, self.w, self.smoothing.c)


@dataclass(frozen=True)
class DiscretizationLevel:
    n_steps: int
    horizon: float

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InvalidParams(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @classmethod
    def from_level(cls, level: int, n0: int, horizon: float) -> "DiscretizationLevel":
        """Level ``l`` of the hierarchy ``N_l = N_0 2^l``."""
        return cls(n0 * 2**level, horizon)

    def coarser(self) -> "DiscretizationLevel":
        if self.n_steps % 2:
            raise InvalidParams(f"cannot halve an odd step count {self.n_steps}")
        return DiscretizationLevel(self.n_steps // 2, self.horizon)


@dataclass(frozen=True)
class RandomStream:
    """Counter-based source of Brownian increments.

    The Philox key packs ``seed`` (low 64 bits) and ``stream_id`` (high 64
    bits); the path index occupies the third counter word, so every path
    owns a disjoint block of ``2**128`` draws.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not 0 <= value < 2**64:
                raise InvalidParams(f"{name} must fit in 64 unsigned bits, got {value}")

    def generator(self, index: int) -> np.random.Generator:
        key = self.seed | (self.stream_id << 64)
        return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, int(index), 0]))

    def substream(self, stream_id: int) -> "RandomStream":
        return RandomStream(self.seed, stream_id)


def generate_increments(level: DiscretizationLevel, dimension: int, stream: RandomStream, index: int) -> np.ndarray:
    """Brownian increments ``N(0, dt I_d)`` of one path, shape ``(N, d)``."""
    z = stream.generator(index).standard_normal((level.n_steps, dimension))
    return np.sqrt(level.dt) * z


def generate_increment_batch(level, dimension, stream, indices) -> np.ndarray:
    """Stacked increments for several path indices, shape ``(B, N, d)``."""
    out = np.empty((len(indices), level.n_steps, dimension))
    for row, index in enumerate(indices):
        out[row] = generate_increments(level, dimension, stream, index)
    return out


def zero_control(t, x, z):
    return np.zeros_like(x)


@dataclass
class PathResult:
    occupation: float
    likelihood: float
    payoff: float
    cost: int


@dataclass
class PathBatch:
    """Per-path outputs of a batch simulation (arrays of shape ``(B,)``)."""

    occupation: np.ndarray
    log_likelihood: np.ndarray
    payoff: np.ndarray
    cost: int  # drift/diffusion evaluations per path

    @property
    def likelihood(self) -> np.ndarray:
        return np.exp(self.log_likelihood)

    def __getitem__(self, i) -> PathResult:
        return PathResult(float(self.occupation[i]), float(np.exp(self.log_likelihood[i])),
                          float(self.payoff[i]), self.cost)


@dataclass
class CoupledPairResult:
    fine_payoff: float
    coarse_payoff: float
    common_likelihood: bool
    fine_likelihood: float = 1.0
    coarse_likelihood: float = 1.0

    @property
    def difference(self) -> float:
        return self.fine_payoff - self.coarse_payoff


@dataclass
class PairBatch:
    fine_payoff: np.ndarray
    coarse_payoff: np.ndarray
    common_likelihood: bool
    fine_log_likelihood: np.ndarray
    coarse_log_likelihood: np.ndarray
    cost: int
    fine_occupation: np.ndarray = field(repr=False, default=None)
    coarse_occupation: np.ndarray = field(repr=False, default=None)

    @property
    def difference(self) -> np.ndarray:
        return self.fine_payoff - self.coarse_payoff

    def __getitem__(self, i) -> CoupledPairResult:
        return CoupledPairResult(
            float(self.fine_payoff[i]), float(self.coarse_payoff[i]), self.common_likelihood,
            float(np.exp(self.fine_log_likelihood[i])), float(np.exp(self.coarse_log_likelihood[i])),
        )


class _Walker:
    """Euler-Maruyama state of a batch of paths at one resolution.

    The occupation is tracked as the running sum of ``f`` values and scaled
    by ``dt`` on demand, so sharp-mode occupations are exact multiples of ``dt``.
    """

    def __init__(self, model: SdeModel, prob: OccupationProblem, dt: float, batch: int):
        self.model, self.prob, self.dt = model, prob, dt
        self.x = np.broadcast_to(model.x0, (batch, model.dimension)).copy()
        self.occ_sum = np.zeros(batch)
        self.log_l = np.zeros(batch)

    @property
    def z(self) -> np.ndarray:
        return np.minimum(self.occ_sum * self.dt, self.prob.horizon)

    def step(self, t: float, shifted: np.ndarray):
        """Advance with an already-shifted increment ``dW + zeta dt``."""
        x = self.x
        rate = self.prob.occupation_rate(self.model.observable(x))
        a = self.model.drift(t, x)
        b = self.model.diffusion(t, x)
        self.x = x + a * self.dt + np.einsum("bij,bj->bi", b, shifted)
        self.occ_sum = self.occ_sum + rate

    def tilt(self, dw: np.ndarray, zeta: np.ndarray) -> np.ndarray:
        """Accumulate the Girsanov log-weight of one step; return the shifted increment."""
        self.log_l = self.log_l - 0.5 * self.dt * np.sum(zeta * zeta, axis=1) - np.sum(dw * zeta, axis=1)
        return dw + zeta * self.dt

    def control(self, control: Control, t: float) -> np.ndarray:
        return np.asarray(control(t, self.x, self.z), dtype=float)

    def finish(self):
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.log_l))):
            raise NonFiniteState("non-finite state or likelihood; check the model or the control")
        z = self.z
        return z, self.log_l, self.prob.payoff(z) * np.exp(self.log_l)


def _batches(indices: Sequence[int], batch_size: int):
    indices = np.asarray(indices, dtype=np.int64)
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def _simulate_block(model, prob, level, control, dw):
    walker = _Walker(model, prob, level.dt, dw.shape[0])
    for n in range(level.n_steps):
        t = n * level.dt
        incr = dw[:, n]
        if control is not None:
            incr = walker.tilt(incr, walker.control(control, t))
        walker.step(t, incr)
    return walker.finish()


def simulate_paths(model: SdeModel, prob: OccupationProblem, level: DiscretizationLevel,
                   control: Optional[Control], stream: RandomStream, indices: Sequence[int],
                   batch_size: int = DEFAULT_BATCH) -> PathBatch:
    """Simulate the (optionally controlled) scheme for the given path indices.

    Without a control the likelihood is identically one; with a control the
    drift is shifted by ``b zeta`` and the log-likelihood ratio accumulates
    ``-dt |zeta|^2 / 2 - <dW, zeta>`` per step.
    """
    parts = []
    for block in _batches(indices, batch_size):
        dw = generate_increment_batch(level, model.dimension, stream, block)
        parts.append(_simulate_block(model, prob, level, control, dw))
    if not parts:
        empty = np.zeros(0)
        return PathBatch(empty, empty, empty, level.n_steps)
    z, log_l, payoff = (np.concatenate(p) for p in zip(*parts))
    return PathBatch(z, log_l, payoff, level.n_steps)


def simulate_path(model, prob, level, control, stream, index: int = 0) -> PathResult:
    return simulate_paths(model, prob, level, control, stream, [index])[0]


def _pair_block_sll(model, prob, fine, control, dw):
    coarse = fine.coarser()
    batch = dw.shape[0]
    wf = _Walker(model, prob, fine.dt, batch)
    wc = _Walker(model, prob, coarse.dt, batch)
    for m in range(coarse.n_steps):
        dw0, dw1 = dw[:, 2 * m], dw[:, 2 * m + 1]
        tc = m * coarse.dt
        incr_c = dw0 + dw1
        if control is not None:
            incr_c = wc.tilt(incr_c, wc.control(control, tc))
        for n, dwn in ((2 * m, dw0), (2 * m + 1, dw1)):
            t = n * fine.dt
            if control is not None:
                dwn = wf.tilt(dwn, wf.control(control, t))
            wf.step(t, dwn)
        wc.step(tc, incr_c)
    zf, lf, gf = wf.finish()
    zc, lc, gc = wc.finish()
    return gf, gc, lf, lc, zf, zc


def _pair_block_cl(model, prob, fine, control, dw):
    coarse = fine.coarser()
    batch = dw.shape[0]
    wf = _Walker(model, prob, fine.dt, batch)
    wc = _Walker(model, prob, coarse.dt, batch)
    for m in range(coarse.n_steps):
        shifted = []
        for n in (2 * m, 2 * m + 1):
            t = n * fine.dt
            dwn = dw[:, n]
            if control is not None:
                dwn = wf.tilt(dwn, wf.control(control, t))
            shifted.append(dwn)
            wf.step(t, dwn)
        wc.step(m * coarse.dt, shifted[0] + shifted[1])
    zf, lf, gf = wf.finish()
    zc, _, _ = wc.finish()
    # the coarse path lives under the fine path's measure: reuse its weight
    gc = prob.payoff(zc) * np.exp(lf)
    return gf, gc, lf, lf, zf, zc


def _simulate_pairs(kernel, common, model, prob, fine, control, stream, indices, batch_size):
    coarse = fine.coarser()
    parts = []
    for block in _batches(indices, batch_size):
        dw = generate_increment_batch(fine, model.dimension, stream, block)
        parts.append(kernel(model, prob, fine, control, dw))
    cols = [np.concatenate(c) for c in zip(*parts)] if parts else [np.zeros(0)] * 6
    gf, gc, lf, lc, zf, zc = cols
    return PairBatch(gf, gc, common, lf, lc, fine.n_steps + coarse.n_steps, zf, zc)


def simulate_pairs_sll(model, prob, fine: DiscretizationLevel, control, stream, indices,
                       batch_size: int = DEFAULT_BATCH) -> PairBatch:
    """Fine/coarse pairs coupled before the change of measure.

    Coarse increments are pairwise sums of the raw fine increments; each
    resolution evaluates its own control and carries its own likelihood.
    """
    return _simulate_pairs(_pair_block_sll, False, model, prob, fine, control, stream, indices, batch_size)


def simulate_pairs_cl(model, prob, fine: DiscretizationLevel, control, stream, indices,
                      batch_size: int = DEFAULT_BATCH) -> PairBatch:
    """Fine/coarse pairs coupled after the change of measure.

    The coarse path is driven by pairwise sums of the shifted fine
    increments (equivalently, raw sums plus the averaged fine control), and
    both payoffs are weighted by the fine likelihood.
    """
    return _simulate_pairs(_pair_block_cl, True, model, prob, fine, control, stream, indices, batch_size)


def simulate_coupled_pair_sll(model, prob, fine, control, stream, index: int = 0) -> CoupledPairResult:
    return simulate_pairs_sll(model, prob, fine, control, stream, [index])[0]


def simulate_coupled_pair_cl(model, prob, fine, control, stream, index: int = 0) -> CoupledPairResult:
    return simulate_pairs_cl(model, prob, fine, control, stream, [index])[0]
