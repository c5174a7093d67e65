"""Continuous-time diffusion schedules with linear drift and scalar diffusion.

Two families are supported:

* ``VE``: zero drift, ``sigma(t) = sigma_max * t / T``.
* ``VP``: drift ``a(t) = -beta(t) / 2`` with ``g(t)^2 = beta(t)``; ``beta`` is
  linear in ``t`` by default, or any callable (integrated by quadrature).

Every coefficient accepts scalars or numpy arrays of times.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, optimize

VE = "VE"
VP = "VP"


class ScheduleDomainError(ValueError):
    """Raised when a time lies outside ``[0, T]``."""


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = VE
    T: float = 1.0
    sigma_max: float = 1.0
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: float = 0.02
    t_max: float = 0.98
    beta_fn: Optional[Callable[[float], float]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in (VE, VP):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not 0.0 <= self.t_min < self.t_max <= self.T:
            raise ValueError(f"need 0 <= t_min < t_max <= T, got {self.t_min}, {self.t_max}")
        if self.kind == VE and not self.sigma_max > 0:
            raise ValueError("sigma_max must be positive")
        if self.kind == VP and self.beta_fn is None and (self.beta_min <= 0 or self.beta_max <= 0):
            raise ValueError("beta must be positive")

    # -- constructors -----------------------------------------------------

    @classmethod
    def ve(cls, sigma_max: float = 1.0, T: float = 1.0, **kw) -> "NoiseSchedule":
        kw.setdefault("t_min", 0.02 * T)
        kw.setdefault("t_max", 0.98 * T)
        return cls(kind=VE, T=T, sigma_max=sigma_max, **kw)

    @classmethod
    def vp(cls, beta_min: float = 0.1, beta_max: float = 20.0, T: float = 1.0, **kw) -> "NoiseSchedule":
        kw.setdefault("t_min", 0.02 * T)
        kw.setdefault("t_max", 0.98 * T)
        return cls(kind=VP, T=T, beta_min=beta_min, beta_max=beta_max, **kw)

    @classmethod
    def vp_constant(cls, beta: float, T: float = 1.0, **kw) -> "NoiseSchedule":
        return cls.vp(beta_min=beta, beta_max=beta, T=T, **kw)

    # -- helpers ----------------------------------------------------------

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0) or np.any(t > self.T) or not np.all(np.isfinite(t)):
            raise ScheduleDomainError(f"time outside [0, {self.T}]: {t}")
        return t

    def beta(self, t):
        """Instantaneous VP noise rate (zero for VE)."""
        t = self._check(t)
        if self.kind == VE:
            return np.zeros_like(t)
        if self.beta_fn is not None:
            return np.vectorize(self.beta_fn, otypes=[float])(t)
        return self.beta_min + (self.beta_max - self.beta_min) * t / self.T

    def beta_integral(self, t0, t1):
        """``int_{t0}^{t1} beta(u) du``, vectorized over both endpoints."""
        t0 = self._check(t0)
        t1 = self._check(t1)
        if self.kind == VE:
            return np.zeros(np.broadcast(t0, t1).shape)
        if self.beta_fn is not None:
            f = lambda a, b: integrate.quad(self.beta_fn, a, b, epsabs=1e-10, epsrel=1e-10)[0]
            return np.vectorize(f, otypes=[float])(t0, t1)
        slope = (self.beta_max - self.beta_min) / self.T
        return self.beta_min * (t1 - t0) + 0.5 * slope * (t1 * t1 - t0 * t0)

    # -- coefficients -----------------------------------------------------

    def drift_coef(self, t):
        """a(t) in f(x, t) = a(t) x."""
        return -0.5 * self.beta(t)

    def g2(self, t):
        """Squared diffusion coefficient g(t)^2."""
        t = self._check(t)
        if self.kind == VE:
            return 2.0 * self.sigma_max**2 * t / self.T**2
        return self.beta(t)

    def alpha(self, t):
        t = self._check(t)
        if self.kind == VE:
            return np.ones_like(t)
        return np.exp(-self.beta_integral(np.zeros_like(t), t))

    def sigma(self, t):
        t = self._check(t)
        if self.kind == VE:
            return self.sigma_max * t / self.T
        # expm1 keeps precision near t = 0
        return np.sqrt(np.expm1(self.beta_integral(np.zeros_like(t), t)))

    def sigma_dot(self, t):
        """d sigma / dt."""
        t = self._check(t)
        if self.kind == VE:
            return np.full_like(t, self.sigma_max / self.T)
        s = self.sigma(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            return 0.5 * self.beta(t) * (1.0 + s * s) / s

    def sqrt_alpha(self, t):
        return np.sqrt(self.alpha(t))

    def noise_std(self, t):
        """Std of the injected noise in unscaled coordinates: sqrt(1-alpha) (VP) or sigma (VE)."""
        t = self._check(t)
        if self.kind == VE:
            return self.sigma(t)
        return np.sqrt(-np.expm1(-self.beta_integral(np.zeros_like(t), t)))

    def t_of_sigma(self, sigma):
        """Inverse of ``sigma(t)``."""
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma < 0) or np.any(sigma > self.sigma(self.T) * (1 + 1e-12)):
            raise ScheduleDomainError(f"sigma outside schedule range: {sigma}")
        if self.kind == VE:
            return np.minimum(sigma * self.T / self.sigma_max, self.T)
        L = np.log1p(sigma * sigma)
        if self.beta_fn is None:
            slope = (self.beta_max - self.beta_min) / self.T
            return np.minimum(2.0 * L / (self.beta_min + np.sqrt(self.beta_min**2 + 2.0 * slope * L)), self.T)

        def solve(level):
            if level == 0.0:
                return 0.0
            fn = lambda u: float(self.beta_integral(0.0, u)) - level
            return optimize.brentq(fn, 0.0, self.T, xtol=1e-14)

        return np.vectorize(solve, otypes=[float])(L)

    def to_scaled(self, x, t):
        """x -> x / sqrt(alpha_t); identity for VE."""
        return np.asarray(x) / _col(self.sqrt_alpha(t))

    def from_scaled(self, x_scaled, sigma):
        """Scaled state at noise level sigma -> unscaled x = x~ / sqrt(1 + sigma^2) (VP)."""
        if self.kind == VE:
            return np.asarray(x_scaled, dtype=float)
        return np.asarray(x_scaled) / _col(np.sqrt(1.0 + np.asarray(sigma, dtype=float) ** 2))

    def scaled_from_sigma(self, x, sigma):
        """Inverse of :meth:`from_scaled`."""
        if self.kind == VE:
            return np.asarray(x, dtype=float)
        return np.asarray(x) * _col(np.sqrt(1.0 + np.asarray(sigma, dtype=float) ** 2))


def _col(v):
    """Broadcast per-row coefficients against (n, d) states."""
    v = np.asarray(v, dtype=float)
    return v[..., None] if v.ndim >= 1 else v


def alpha_at(schedule: NoiseSchedule, t):
    return schedule.alpha(t)


def sigma_at(schedule: NoiseSchedule, t):
    return schedule.sigma(t)


def scale_factor(schedule: NoiseSchedule, s, t):
    """c(s, t) = exp(int_s^t a(u) du)."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if schedule.kind == VE:
        schedule._check(s)
        schedule._check(t)
        return np.ones(np.broadcast(s, t).shape)
    lo, hi = np.minimum(s, t), np.maximum(s, t)
    sign = np.where(t >= s, 1.0, -1.0)
    return np.exp(-0.5 * sign * schedule.beta_integral(lo, hi))


def theorem_weight(schedule: NoiseSchedule, t):
    """w(t) = (T - t) g(t)^2 c(t, 0)^2 / 2."""
    t = np.asarray(t, dtype=float)
    return 0.5 * (schedule.T - t) * schedule.g2(t) * scale_factor(schedule, t, 0.0) ** 2


def perturb(schedule: NoiseSchedule, x0, t, noise):
    x0 = np.asarray(x0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if x0.shape != noise.shape:
        raise ValueError(f"noise shape {noise.shape} does not match x0 shape {x0.shape}")
    return _col(schedule.sqrt_alpha(t)) * x0 + _col(schedule.noise_std(t)) * noise
