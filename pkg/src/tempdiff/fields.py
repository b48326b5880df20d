"""Closed-form score and energy fields for diffused Gaussian targets.

Under the variance-exploding path, a Gaussian target N(0, v0 I) has
marginals N(0, (v0 + sigma_t^2) I), so the time-dependent score and
energy are available exactly.  These fields serve as oracles for the
weighted-SDE machinery and as drop-in replacements for trained heads.

Field protocol (duck-typed, consumed by the annealer and divergence):

* score fields: ``value(x, t) -> (B, d)``, ``vjp(x, t, v) -> (B, d)``,
  ``jacobian_trace(x, t) -> (B,)``, attribute ``dim``.
* energy fields: ``value(x, t) -> (B,)``, ``grad(x, t) -> (B, d)``,
  ``dt(x, t) -> (B,)``, attribute ``dim``.
"""

from __future__ import annotations

import numpy as np

from .schedule import NoiseSchedule

__all__ = [
    "GaussianScoreField",
    "GaussianEnergyField",
    "LinearScoreField",
    "ShiftedEnergyField",
    "ScaledScoreField",
]


class GaussianScoreField:
    """Exact score of the VE-diffused Gaussian N(0, v0 I)."""

    def __init__(self, schedule: NoiseSchedule, dim: int, var0: float = 1.0):
        self.schedule = schedule
        self.dim = dim
        self.var0 = float(var0)

    def _var(self, t):
        return self.var0 + self.schedule.sigma_rev(t) ** 2

    def value(self, x, t):
        return -np.atleast_2d(x) / self._var(t)

    def vjp(self, x, t, v):
        return -np.asarray(v, dtype=np.float64) / self._var(t)

    def jacobian_trace(self, x, t):
        x = np.atleast_2d(x)
        return np.full(x.shape[0], -self.dim / self._var(t))


class GaussianEnergyField:
    """Exact energy of the VE-diffused Gaussian: ||x||^2 / (2 (v0 + sigma_t^2))."""

    def __init__(self, schedule: NoiseSchedule, dim: int, var0: float = 1.0):
        self.schedule = schedule
        self.dim = dim
        self.var0 = float(var0)

    def _var(self, t):
        return self.var0 + self.schedule.sigma_rev(t) ** 2

    def value(self, x, t):
        x = np.atleast_2d(x)
        return np.sum(x * x, axis=1) / (2.0 * self._var(t))

    def grad(self, x, t):
        return np.atleast_2d(x) / self._var(t)

    def dt(self, x, t, **_):
        # d/dt of 1/(2(v0 + sigma_t^2)) with d(sigma_t^2)/dt = -zeta_t^2
        x = np.atleast_2d(x)
        zeta_sq = self.schedule.zeta_sq(t)
        return np.sum(x * x, axis=1) * zeta_sq / (2.0 * self._var(t) ** 2)


class LinearScoreField:
    """Time-independent linear field s(x) = x A^T, for divergence tests."""

    def __init__(self, a: np.ndarray):
        self.a = np.asarray(a, dtype=np.float64)
        self.dim = self.a.shape[0]

    def value(self, x, t):
        return np.atleast_2d(x) @ self.a.T

    def vjp(self, x, t, v):
        return np.asarray(v, dtype=np.float64) @ self.a

    def jacobian_trace(self, x, t):
        x = np.atleast_2d(x)
        return np.full(x.shape[0], np.trace(self.a))


class ShiftedEnergyField:
    """Wrap an energy field with a constant additive offset (gauge shift)."""

    def __init__(self, base, offset: float):
        self.base = base
        self.offset = float(offset)
        self.dim = base.dim

    def value(self, x, t):
        return self.base.value(x, t) + self.offset

    def grad(self, x, t):
        return self.base.grad(x, t)

    def dt(self, x, t, **kw):
        return self.base.dt(x, t, **kw)


class ScaledScoreField:
    """Wrap a score field with a constant multiplier c_s."""

    def __init__(self, base, scale: float):
        self.base = base
        self.scale = float(scale)
        self.dim = base.dim

    def value(self, x, t):
        return self.scale * self.base.value(x, t)

    def vjp(self, x, t, v):
        return self.scale * self.base.vjp(x, t, v)

    def jacobian_trace(self, x, t):
        return self.scale * self.base.jacobian_trace(x, t)
