"""Finite-difference solver for the auxiliary Kolmogorov backward equation.

Solves ``v_t + a v_x + f(x) v_z + b^2 v_xx / 2 = 0`` backward from
``v(T, x, z) = g_w(z)`` on a uniform ``(t, x, z)`` grid with ``P`` steps per
axis.  Each backward step applies an explicit upwind sweep for the
z-advection and then one implicit x-solve (upwind advection, central
diffusion).  The x-operator does not depend on ``z``, so every z-slice shares
the same tridiagonal matrix and a single banded solve handles all of them.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import BadFit, SingularTridiagonal, UnstableSolve
from .paths import OccupationProblem, SdeModel
from .rice import ProjectedModel
from .smoothing import SmoothingParams

V_FLOOR = 1e-12
ZETA_MAX = 50.0


@dataclass
class HjbGrid:
    """Discrete solution ``values[i, j, k] = v(t_i, x_j, z_k)``."""

    values: np.ndarray
    horizon: float
    x_min: float
    x_max: float
    w: float
    gamma_th: float
    smoothing: Optional[SmoothingParams] = None
    solve_seconds: float = field(default=0.0, compare=False)

    @property
    def resolution(self) -> int:
        return self.values.shape[0] - 1

    @property
    def dt(self) -> float:
        return self.horizon / self.resolution

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.resolution

    @property
    def dz(self) -> float:
        return self.horizon / self.resolution

    @property
    def t_nodes(self):
        return np.linspace(0.0, self.horizon, self.resolution + 1)

    @property
    def x_nodes(self):
        return np.linspace(self.x_min, self.x_max, self.resolution + 1)

    @property
    def z_nodes(self):
        return np.linspace(0.0, self.horizon, self.resolution + 1)

    def header(self) -> dict:
        smoothing = None if self.smoothing is None else {"c": self.smoothing.c, "d": self.smoothing.d}
        return {"P": self.resolution, "T": self.horizon, "x_min": self.x_min, "x_max": self.x_max,
                "z_min": 0.0, "z_max": self.horizon, "w": self.w, "gamma_th": self.gamma_th,
                "smoothing": smoothing}

    def save(self, path, binary: bool = True) -> None:
        """Write one JSON header line, then the values in row-major ``[t][x][z]`` order.

        Binary mode stores little-endian float64; text mode stores one CSV row
        of z-values per ``(t, x)`` pair.
        """
        head = self.header()
        head["format"] = "binary-f8le" if binary else "csv"
        with open(path, "wb") as fh:
            fh.write((json.dumps(head, sort_keys=True) + "\n").encode())
            if binary:
                fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
            else:
                flat = self.values.reshape(-1, self.values.shape[-1])
                np.savetxt(fh, flat, delimiter=",", fmt="%.17g")

    @classmethod
    def load(cls, path) -> "HjbGrid":
        with open(path, "rb") as fh:
            head = json.loads(fh.readline().decode())
            n = head["P"] + 1
            if head["format"] == "binary-f8le":
                values = np.frombuffer(fh.read(), dtype="<f8").astype(float)
            else:
                values = np.loadtxt(fh, delimiter=",", ndmin=2)
        smoothing = None if head["smoothing"] is None else SmoothingParams(**head["smoothing"])
        return cls(values.reshape(n, n, n), head["T"], head["x_min"], head["x_max"],
                   head["w"], head["gamma_th"], smoothing)


def _dirichlet_masks(prob: OccupationProblem, t: float, z: np.ndarray):
    """Regions where the value is known from the characteristics.

    Occupation only grows, at most one unit per unit time: once the payoff
    is saturated it stays so (value 1), and if even full future occupation
    cannot reach the payoff's support the value is 0.
    """
    if prob.smoothing is None:
        upper, lower = prob.w, prob.w
        return z >= upper, z + (prob.horizon - t) < lower
    c = prob.smoothing.c
    return z >= prob.w + c, z + (prob.horizon - t) <= prob.w - c


def solve(pm: ProjectedModel, prob: OccupationProblem, P: int, z_substeps: int = 2) -> HjbGrid:
    """Backward IMEX solve on a ``(P+1)^3`` grid.

    The z-sweep uses the ``z + dz`` neighbour (occupation only increases) and
    ``z_substeps`` explicit substeps of size ``dt / z_substeps``; with
    ``dt = dz`` the Courant number is ``max f / z_substeps <= 1``.  At both
    x-ends the ghost value ``2 v_1 - v_2`` (linear extrapolation) is folded
    into the first and last interior rows, and the edge nodes are then
    recovered by the same extrapolation, clipped to ``[0, 1]``.
    """
    if P < 8:
        raise ValueError(f"resolution P must be at least 8, got {P}")
    start = time.perf_counter()
    T = prob.horizon
    dt = T / P
    x = np.linspace(pm.x_min, pm.x_max, P + 1)
    z = np.linspace(0.0, T, P + 1)
    dx = (pm.x_max - pm.x_min) / P
    dz = T / P
    rate = prob.occupation_rate(x)  # f at the x nodes, shape (P+1,)

    values = np.empty((P + 1, P + 1, P + 1))
    v = np.broadcast_to(prob.payoff(z), (P + 1, P + 1)).copy()
    values[P] = v

    courant = (dt / z_substeps) / dz * rate[:, None]
    for i in range(P - 1, -1, -1):
        t = i * dt
        for _ in range(z_substeps):
            ghost = v[:, -1:]  # zero-gradient beyond z_max
            v = v + courant * (np.concatenate([v[:, 1:], ghost], axis=1) - v)

        a = np.asarray(pm.drift(t, x), dtype=float)
        b2 = np.asarray(pm.diffusion(t, x), dtype=float) ** 2
        lower = -dt * (np.maximum(-a, 0.0) / dx + 0.5 * b2 / dx**2)
        upper = -dt * (np.maximum(a, 0.0) / dx + 0.5 * b2 / dx**2)
        diag = 1.0 - lower - upper
        # interior unknowns j = 1..P-1 with the ghost nodes eliminated
        d_in = diag[1:P].copy()
        lo_in = lower[1:P].copy()
        up_in = upper[1:P].copy()
        d_in[0] += 2.0 * lower[1]
        up_in[0] -= lower[1]
        d_in[-1] += 2.0 * upper[P - 1]
        lo_in[-1] -= upper[P - 1]
        ab = np.zeros((3, P - 1))
        ab[0, 1:] = up_in[:-1]
        ab[1] = d_in
        ab[2, :-1] = lo_in[1:]
        try:
            interior = scipy.linalg.solve_banded((1, 1), ab, v[1:P], check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SingularTridiagonal(f"x-solve failed at t={t:.6g}: {exc}") from exc
        v = np.empty_like(v)
        v[1:P] = interior
        v[0] = np.clip(2.0 * interior[0] - interior[1], 0.0, 1.0)
        v[P] = np.clip(2.0 * interior[-1] - interior[-2], 0.0, 1.0)

        one, zero = _dirichlet_masks(prob, t, z)
        v[:, one] = 1.0
        v[:, zero] = 0.0
        if not np.all(np.isfinite(v)) or v.min() < -1e-6 or v.max() > 1.0 + 1e-6:
            raise UnstableSolve(f"values left [0, 1] at t={t:.6g}: range [{v.min():.3g}, {v.max():.3g}]")
        values[i] = v

    np.clip(values, 0.0, 1.0, out=values)
    return HjbGrid(values, T, pm.x_min, pm.x_max, prob.w, prob.gamma_th, prob.smoothing,
                   solve_seconds=time.perf_counter() - start)


class ControlField:
    """Importance-sampling control read off a solved grid.

    ``zeta(t, x, z) = b(t, x)^T grad h(x) * d/dx log v(t, h(x), z)``: the
    log-derivative uses central differences at the nodes (one-sided at the
    edges), piecewise-constant interpolation in time (nearest earlier slice)
    and bilinear interpolation in ``(x, z)`` with out-of-box points clamped.
    The value is floored at ``v_floor`` before dividing and the resulting
    vector is capped in norm at ``zeta_max``.
    """

    def __init__(self, grid: HjbGrid, model: SdeModel, zeta_max: float = ZETA_MAX, v_floor: float = V_FLOOR):
        self.grid, self.model = grid, model
        self.zeta_max, self.v_floor = zeta_max, v_floor
        self._flat = grid.values.reshape(-1)
        self._n = grid.resolution + 1

    def log_derivative(self, t: float, xbar, z) -> np.ndarray:
        g = self.grid
        P, n = g.resolution, self._n
        i = min(max(int(np.floor(t / g.dt + 1e-9)), 0), P)
        xs = np.clip(np.asarray(xbar, dtype=float), g.x_min, g.x_max)
        zs = np.clip(np.asarray(z, dtype=float), 0.0, g.horizon)
        ux = (xs - g.x_min) / g.dx
        uz = zs / g.dz
        j = np.clip(np.floor(ux).astype(np.int64), 0, P - 1)
        k = np.clip(np.floor(uz).astype(np.int64), 0, P - 1)
        fx = ux - j
        fz = uz - k

        base = i * n * n
        def at(jj, kk):
            return self._flat[base + jj * n + kk]

        def node_slope(jj, kk):
            lo = np.maximum(jj - 1, 0)
            hi = np.minimum(jj + 1, P)
            return (at(hi, kk) - at(lo, kk)) / ((hi - lo) * g.dx)

        def bilinear(fn):
            return ((1 - fx) * ((1 - fz) * fn(j, k) + fz * fn(j, k + 1))
                    + fx * ((1 - fz) * fn(j + 1, k) + fz * fn(j + 1, k + 1)))

        value = bilinear(at)
        slope = bilinear(node_slope)
        return slope / np.maximum(value, self.v_floor)

    def __call__(self, t: float, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        model = self.model
        s = self.log_derivative(t, model.observable(x), z)
        direction = np.einsum("bji,bj->bi", model.diffusion(t, x), model.observable_grad(x))
        zeta = direction * s[:, None]
        norm = np.sqrt(np.sum(zeta * zeta, axis=1))
        scale = np.where(norm > self.zeta_max, self.zeta_max / np.maximum(norm, 1e-300), 1.0)
        return zeta * scale[:, None]


def control_eval(grid: HjbGrid, model: SdeModel, t: float, x_state, z, zeta_max: float = ZETA_MAX) -> np.ndarray:
    """Control at a single point ``(t, x_state, z)``; returns a d-vector."""
    x = np.asarray(x_state, dtype=float).reshape(1, -1)
    return ControlField(grid, model, zeta_max)(t, x, np.array([float(z)]))[0]


@dataclass(frozen=True)
class PdeCostModel:
    """Solve time model ``C_PDE * P^3`` (seconds)."""

    c_pde: float = 7e-7

    def __post_init__(self):
        if not self.c_pde > 0:
            raise ValueError("C_PDE must be positive")


def pde_work(cost: PdeCostModel, P) -> float:
    return cost.c_pde * P**3


def calibrate_pde_cost(resolutions: Sequence[float], seconds: Sequence[float]) -> PdeCostModel:
    """Fit ``log(time) = log(C_PDE) + 3 log(P)`` with the slope pinned to 3."""
    P = np.asarray(resolutions, dtype=float)
    secs = np.asarray(seconds, dtype=float)
    if P.size < 3 or P.max() / P.min() < 4:
        raise BadFit("need at least 3 timings spanning a factor 4 in P")
    if np.any(secs <= 0):
        raise BadFit("timings must be positive")
    y = np.log(secs)
    log_c = np.mean(y - 3.0 * np.log(P))
    resid = y - (log_c + 3.0 * np.log(P))
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 0.0
    if r2 < 0.9:
        raise BadFit(f"cubic model explains too little of the timing variance (R^2={r2:.3f})")
    return PdeCostModel(float(np.exp(log_c)))
