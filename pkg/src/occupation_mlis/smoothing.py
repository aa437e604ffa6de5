"""Piecewise-linear ramps replacing the occupation and tail indicators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParams


@dataclass(frozen=True)
class SmoothingParams:
    """Half-widths of the two ramps.

    ``d`` smooths the below-threshold indicator (units of the observable),
    ``c`` smooths the tail indicator (units of time).
    """

    c: float = 0.5
    d: float = 0.125

    def __post_init__(self):
        if not (self.c > 0 and self.d > 0):
            raise InvalidParams(f"smoothing half-widths must be positive, got c={self.c}, d={self.d}")


def f_smooth(x, gamma_th, d):
    """Ramp version of ``1{x < gamma_th}``: 1 at ``gamma_th - d``, 0 at ``gamma_th + d``."""
    ramp = np.clip(0.5 + (np.asarray(x, dtype=float) - gamma_th) / (2.0 * d), 0.0, 1.0)
    return 1.0 - ramp


def g_smooth(x, w, c):
    """Ramp version of ``1{x > w}``: 0 at ``w - c``, 1 at ``w + c``."""
    return np.clip(0.5 + (np.asarray(x, dtype=float) - w) / (2.0 * c), 0.0, 1.0)
