"""Rice fading model: two independent OU components and the signal power.

The power ``h = I^2 + Q^2`` is mimicked by a scalar SDE whose coefficients
are the conditional expectations of the Ito drift and squared diffusion of
``h`` given ``h = x``.  Because ``(I(t), Q(t))`` is Gaussian, conditioning on
the radius leaves a tilted (von Mises) density on the angle, which is
integrated numerically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidParams, QuadratureFailure
from .paths import SdeModel


@dataclass(frozen=True)
class RiceParams:
    k: float = 0.25
    theta: float = 0.2
    beta: float = 0.375
    i0: float = 1.0
    q0: float = 1.0

    def __post_init__(self):
        if not self.k > 0:
            raise InvalidParams(f"mean-reversion k must be positive, got {self.k}")
        if not self.beta > 0:
            raise InvalidParams(f"volatility beta must be positive, got {self.beta}")

    def means(self, t):
        """Means of ``I(t)`` and ``Q(t)``."""
        decay = np.exp(-self.k * np.asarray(t, dtype=float))
        return self.theta + (self.i0 - self.theta) * decay, self.theta + (self.q0 - self.theta) * decay

    def variance(self, t):
        """Common variance of ``I(t)`` and ``Q(t)``."""
        t = np.asarray(t, dtype=float)
        return self.beta**2 * -np.expm1(-2.0 * self.k * t) / (2.0 * self.k)


def rice_model(params: RiceParams) -> SdeModel:
    k, theta, beta = params.k, params.theta, params.beta
    eye = beta * np.eye(2)

    def drift(t, x):
        return k * (theta - x)

    def diffusion(t, x):
        return np.broadcast_to(eye, (x.shape[0], 2, 2))

    def observable(x):
        return x[:, 0] ** 2 + x[:, 1] ** 2

    def observable_grad(x):
        return 2.0 * x

    return SdeModel(2, drift, diffusion, observable, observable_grad, np.array([params.i0, params.q0]))


@dataclass(frozen=True)
class ProjectedModel:
    """Scalar surrogate ``dX = a(t, X) dt + b(t, X) dW`` on ``[x_min, x_max]``."""

    drift: Callable[[float, np.ndarray], np.ndarray]
    diffusion: Callable[[float, np.ndarray], np.ndarray]
    x_min: float
    x_max: float
    x0: float


def angular_mean(r, mean_i, mean_q, var, n_nodes=256, rtol=1e-8, max_nodes=2**16):
    """``E[cos(phi) + sin(phi)]`` under the density ``exp(r (m_I cos + m_Q sin) / var)``.

    Periodic trapezoid rule, doubling the node count until two successive
    estimates agree to ``rtol``.  ``r`` may be an array; ``var == 0`` is the
    deterministic limit where the angle is pinned to the mean direction.
    """
    r = np.atleast_1d(np.asarray(r, dtype=float))
    norm = np.hypot(mean_i, mean_q)
    if norm == 0.0:
        return np.zeros_like(r)
    direction = (mean_i + mean_q) / norm
    if var <= 0.0:
        return np.where(r > 0, direction, 0.0)
    psi = np.arctan2(mean_q, mean_i)
    kappa = r * norm / var

    def rule(n):
        phi = 2.0 * np.pi * np.arange(n) / n
        shifted = np.cos(phi - psi)
        # stabilize with the max exponent kappa (attained at phi = psi)
        wgt = np.exp(kappa[:, None] * (shifted[None, :] - 1.0))
        return (wgt @ shifted) / wgt.sum(axis=1)

    n = n_nodes
    prev = rule(n)
    while True:
        n *= 2
        if n > max_nodes:
            raise QuadratureFailure(f"angular quadrature not converged within {max_nodes} nodes")
        cur = rule(n)
        # the mean lies in [-1, 1]; near zero the tolerance becomes absolute
        if np.all(np.abs(cur - prev) <= rtol * np.maximum(np.abs(cur), 1.0)):
            return cur * direction
        prev = cur


def default_x_max(params: RiceParams, horizon: float, n_probe: int = 512) -> float:
    """Upper edge of the power domain: five standard deviations of the radius, squared.

    Taken as the maximum over ``[0, T]`` (the mean radius decays from its
    initial value while the spread grows) and rounded up to an integer.
    """
    t = np.linspace(0.0, horizon, n_probe + 1)
    mi, mq = params.means(t)
    reach = np.hypot(mi, mq) + 5.0 * np.sqrt(params.variance(t))
    return float(np.ceil(np.max(reach**2)))


def project(params: RiceParams, horizon: float = 5.0, x_max: float | None = None,
            n_nodes: int = 256, rtol: float = 1e-8) -> ProjectedModel:
    """Markovian projection of ``I^2 + Q^2``.

    Ito's formula gives ``d(I^2+Q^2) = [2 k theta (I+Q) - 2k h + 2 beta^2] dt
    + 2 beta (I dW_I + Q dW_Q)``, so ``b(t, x) = 2 beta sqrt(x)`` and the drift
    needs ``E[I + Q | I^2 + Q^2 = x] = sqrt(x) * angular_mean``.
    """
    k, theta, beta = params.k, params.theta, params.beta
    if x_max is None:
        x_max = default_x_max(params, horizon)

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(np.maximum(x, 0.0))
        mi, mq = params.means(t)
        cond = r * angular_mean(r.reshape(-1), float(mi), float(mq), float(params.variance(t)),
                                n_nodes=n_nodes, rtol=rtol).reshape(x.shape)
        return 2.0 * k * theta * cond + 2.0 * beta**2 - 2.0 * k * x

    def diffusion(t, x):
        return 2.0 * beta * np.sqrt(np.maximum(np.asarray(x, dtype=float), 0.0))

    return ProjectedModel(drift, diffusion, 0.0, float(x_max), params.i0**2 + params.q0**2)
