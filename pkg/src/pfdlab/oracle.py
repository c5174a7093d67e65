"""Closed-form references for Gaussian PF-ODE flows and the two sides of the
time-averaged KL gradient identity.

Nothing here calls the schedule coefficient methods or the solvers: the
coefficients are re-derived from the schedule parameters so that a bug in
either path cannot cancel out.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import simpson

from .schedules import VE, NoiseSchedule


def _coeffs(schedule: NoiseSchedule, t):
    """(alpha, noise variance, g^2, integral of a from 0 to t) straight from the parameters."""
    t = np.asarray(t, dtype=float)
    if schedule.beta_fn is not None:
        raise NotImplementedError("oracle covers constant/linear coefficients only")
    if schedule.kind == VE:
        sig = schedule.sigma_max * t / schedule.T
        return np.ones_like(t), sig * sig, 2.0 * schedule.sigma_max**2 * t / schedule.T**2, np.zeros_like(t)
    b0, b1, T = schedule.beta_min, schedule.beta_max, schedule.T
    B = b0 * t + 0.5 * (b1 - b0) * t * t / T
    alpha = np.exp(-B)
    return alpha, 1.0 - alpha, b0 + (b1 - b0) * t / T, -0.5 * B


@dataclass(frozen=True)
class AffineFlow:
    """x -> scale * x + shift, mapping states at ``from_time`` to ``to_time``."""

    scale: float
    shift: np.ndarray
    from_time: float
    to_time: float

    def __call__(self, x):
        return self.scale * np.asarray(x, dtype=float) + self.shift

    def then(self, other: "AffineFlow") -> "AffineFlow":
        """Apply ``self`` first, then ``other``."""
        if not np.isclose(other.from_time, self.to_time):
            raise ValueError("flows do not chain")
        return AffineFlow(other.scale * self.scale, other.scale * self.shift + other.shift, self.from_time, other.to_time)

    def inverse(self) -> "AffineFlow":
        return AffineFlow(1.0 / self.scale, -self.shift / self.scale, self.to_time, self.from_time)


def gaussian_marginal(schedule: NoiseSchedule, mean, std, t):
    """Mean and variance of N(mean, std^2 I) diffused to time t."""
    alpha, nu, _, _ = _coeffs(schedule, t)
    return np.sqrt(alpha) * np.asarray(mean, dtype=float), alpha * std * std + nu


def gaussian_flow(schedule: NoiseSchedule, mean, std: float, s: float, t: float) -> AffineFlow:
    """Exact PF-ODE flow map for an isotropic Gaussian prior.

    The deviation from the moving mean scales with the marginal standard
    deviation: x_t - m_t = sqrt(v_t / v_s) (x_s - m_s).
    """
    m_s, v_s = gaussian_marginal(schedule, mean, std, float(s))
    m_t, v_t = gaussian_marginal(schedule, mean, std, float(t))
    k = float(np.sqrt(v_t / v_s))
    return AffineFlow(k, m_t - k * m_s, float(s), float(t))


def gaussian_score(schedule: NoiseSchedule, mean, std, x, t):
    m, v = gaussian_marginal(schedule, mean, std, t)
    return -(np.asarray(x) - m) / v


@dataclass
class Theorem1Result:
    lhs: np.ndarray
    rhs: np.ndarray
    rel_err: float
    rhs_true_jacobian: np.ndarray
    rel_err_true_jacobian: float

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.rel_err))

    def to_json(self) -> str:
        return json.dumps({k: np.asarray(v).tolist() for k, v in asdict(self).items()})


def _rel(a, b):
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    den = np.linalg.norm(b)
    num = np.linalg.norm(a - b)
    return float(num / den) if den > 0 else float(num)


def _simpson_grid(T, panels):
    panels = panels + (panels % 2)
    return np.linspace(0.0, T, panels + 1)


def theorem1_check(
    schedule: NoiseSchedule,
    q0: tuple,
    p0: tuple,
    x0,
    n_quad: int = 10_000,
    n_mc: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Theorem1Result:
    """Both sides of E_t[Delta_t] = E_t[(T - t) g^2 c(t, 0) grad log(q_t / p_t)(x_t) / 2].

    ``q0`` and ``p0`` are ``(mean, std)`` isotropic Gaussians.  The left side
    composes the exact forward q-flow and reverse p-flow; it is averaged over t
    by Simpson quadrature, or by ``n_mc`` uniform draws when given.  The right
    side is always Simpson quadrature.  ``rhs_true_jacobian`` replaces c(t, 0)
    with the actual spatial derivative of the reverse p-flow, which is what the
    left side obeys exactly when scores are not frozen.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    T = schedule.T
    (mq, sq), (mp, sp) = q0, p0
    mq, mp = np.broadcast_to(mq, x0.shape).astype(float), np.broadcast_to(mp, x0.shape).astype(float)

    def paths(t):
        # vectorized over a 1-D array of times; returns x_t, Delta_t, reverse-flow slope
        t = np.asarray(t, dtype=float)[:, None]
        alpha, nu, g2, int_a = _coeffs(schedule, t)
        ra = np.sqrt(alpha)
        vq0, vp0 = sq * sq, sp * sp
        vq, vp = alpha * vq0 + nu, alpha * vp0 + nu
        xt = ra * mq + np.sqrt(vq / vq0) * (x0 - mq)
        back = np.sqrt(vp0 / vp)
        xhat = mp + back * (xt - ra * mp)
        dscore = -(xt - ra * mq) / vq + (xt - ra * mp) / vp
        return xt, x0 - xhat, back, 0.5 * (T - t) * g2 * dscore, np.exp(-int_a)

    grid = _simpson_grid(T, n_quad)
    _, delta, back, wdiff, c_t0 = paths(grid)
    if n_mc is None:
        lhs = simpson(delta, x=grid, axis=0) / T
    else:
        rng = np.random.default_rng() if rng is None else rng
        lhs = paths(rng.uniform(0.0, T, size=n_mc))[1].mean(axis=0)
    rhs = simpson(wdiff * c_t0, x=grid, axis=0) / T
    rhs_true = simpson(wdiff * back, x=grid, axis=0) / T
    return Theorem1Result(lhs, rhs, _rel(lhs, rhs), rhs_true, _rel(lhs, rhs_true))


def fd_gradient(fn: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    flat = g.reshape(-1)
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = step
        e = e.reshape(x.shape)
        fp, fm = fn(x + e), fn(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {j}")
        flat[j] = (fp - fm) / (2.0 * step)
    return g
