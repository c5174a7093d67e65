"""Fixed-step probability-flow ODE integration (Euler / Heun) in both time directions.

Two parameterizations are available:

* ``native``: integrate dx/dt = a(t) x - g(t)^2 score(x, t) / 2 on a grid uniform in t.
* ``sigma``: integrate the scaled state x~ = x / sqrt(alpha) through
  dx~/dsigma = eps(x, t(sigma)) on a grid uniform in sigma.

Batches carry one time interval per row, and each row takes its own number of
steps. Score evaluations are plain array values, so nothing downstream can
differentiate through them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .schedules import NoiseSchedule, ScheduleDomainError, _col
from .score_fields.base import ScoreField, SingularScalingError, as_rows, row_times

EULER = "euler"
HEUN = "heun"
NATIVE = "native"
SIGMA = "sigma"


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, rows=None):
        self.step = step
        self.rows = rows
        super().__init__(f"PF-ODE state became non-finite at step {step}" + (f" (rows {rows})" if rows is not None else ""))


@dataclass(frozen=True)
class SolverConfig:
    method: str = HEUN
    policy: str = "proportional"  # or "fixed"
    n_steps: int = 1
    k: float = 10.0
    parameterization: str = NATIVE

    def __post_init__(self):
        if self.method not in (EULER, HEUN):
            raise ValueError(f"unknown method {self.method!r}")
        if self.policy not in ("fixed", "proportional"):
            raise ValueError(f"unknown step policy {self.policy!r}")
        if self.policy == "fixed" and int(self.n_steps) < 1:
            raise ValueError("fixed step count must be >= 1")
        if self.policy == "proportional" and not self.k > 0:
            raise ValueError("proportional factor k must be positive")
        if self.parameterization not in (NATIVE, SIGMA):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")

    @classmethod
    def fixed(cls, n: int, method: str = HEUN, parameterization: str = NATIVE) -> "SolverConfig":
        return cls(method=method, policy="fixed", n_steps=int(n), parameterization=parameterization)

    @classmethod
    def proportional(cls, k: float = 10.0, method: str = HEUN, parameterization: str = NATIVE) -> "SolverConfig":
        return cls(method=method, policy="proportional", k=float(k), parameterization=parameterization)

    def steps_for(self, t, T: float):
        """Steps for an interval reaching time ``t``: n, or max(1, floor(k t / T))."""
        t = np.asarray(t, dtype=float)
        if self.policy == "fixed":
            return np.full(t.shape, int(self.n_steps), dtype=np.int64)
        return np.maximum(1, np.floor(self.k * t / T + 1e-12).astype(np.int64))


@dataclass
class Trajectory:
    times: np.ndarray  # (K+1,) or (K+1, n)
    states: np.ndarray  # (K+1, d) or (K+1, n, d)
    direction: str

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if self.states.ndim == 2:
                d = self.states.shape[1]
                w.writerow(["step", "t"] + [f"x_{j}" for j in range(d)])
                for k, (t, x) in enumerate(zip(self.times, self.states)):
                    w.writerow([k, repr(float(t))] + [repr(float(v)) for v in x])
            else:
                d = self.states.shape[2]
                w.writerow(["step", "particle", "t"] + [f"x_{j}" for j in range(d)])
                times = self.times if self.times.ndim == 2 else np.repeat(self.times[:, None], self.states.shape[1], 1)
                for k in range(len(self.states)):
                    for i, x in enumerate(self.states[k]):
                        w.writerow([k, i, repr(float(times[k, i]))] + [repr(float(v)) for v in x])


def pf_velocity(schedule: NoiseSchedule, field: ScoreField, x, t):
    """a(t) x - g(t)^2 score(x, t) / 2."""
    xb, single = as_rows(x)
    tb = row_times(t, len(xb))
    s = field.score(xb, tb)
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("score field returned non-finite values")
    v = _col(schedule.drift_coef(tb)) * xb - 0.5 * _col(schedule.g2(tb)) * s
    return v[0] if single else v


def _native_flow(schedule, field, x, t0, t1, n, method, record, score_hook=None):
    """Per-row fixed-step integration; ``score_hook(k, stage, rows, x, t)`` may replace score calls."""

    def velocity(k, stage, rows, xs, ts):
        if score_hook is not None:
            s = score_hook(k, stage, rows, xs, ts)
        else:
            s = field.score(xs, ts)
        if not np.all(np.isfinite(s)):
            raise DivergenceError(k, rows[~np.all(np.isfinite(s), axis=1)].tolist())
        return _col(schedule.drift_coef(ts)) * xs - 0.5 * _col(schedule.g2(ts)) * s

    x = x.copy()
    kmax = int(n.max()) if len(n) else 0
    times = [t0.copy()] if record else None
    states = [x.copy()] if record else None
    span = t1 - t0
    for k in range(kmax):
        rows = np.nonzero(k < n)[0]
        nk = n[rows]
        ta = t0[rows] + span[rows] * (k / nk)
        tb = np.where(k + 1 == nk, t1[rows], t0[rows] + span[rows] * ((k + 1) / nk))
        h = _col(tb - ta)
        xa = x[rows]
        v1 = velocity(k, 0, rows, xa, ta)
        if method == EULER:
            xn = xa + h * v1
        else:
            xp = xa + h * v1
            v2 = velocity(k, 1, rows, xp, tb)
            xn = xa + 0.5 * h * (v1 + v2)
        if not np.all(np.isfinite(xn)):
            raise DivergenceError(k, rows[~np.all(np.isfinite(xn), axis=1)].tolist())
        x[rows] = xn
        if record:
            tt = times[-1].copy()
            tt[rows] = tb
            times.append(tt)
            states.append(x.copy())
    return x, times, states


def _sigma_flow(schedule, field, x, t0, t1, n, method, record):
    s0 = schedule.sigma(t0)
    s1 = schedule.sigma(t1)
    y = schedule.to_scaled(x, t0)  # scaled state
    kmax = int(n.max()) if len(n) else 0
    times = [t0.copy()] if record else None
    states = [x.copy()] if record else None
    cur_t = t0.copy()
    span = s1 - s0

    def eps_at(k, rows, ys, sig):
        ts = schedule.t_of_sigma(sig)
        e = field.eps(schedule.from_scaled(ys, sig), ts)
        if not np.all(np.isfinite(e)):
            raise DivergenceError(k, rows[~np.all(np.isfinite(e), axis=1)].tolist())
        return e

    for k in range(kmax):
        rows = np.nonzero(k < n)[0]
        nk = n[rows]
        sa = s0[rows] + span[rows] * (k / nk)
        sb = np.where(k + 1 == nk, s1[rows], s0[rows] + span[rows] * ((k + 1) / nk))
        h = _col(sb - sa)
        ya = y[rows]
        e1 = eps_at(k, rows, ya, sa)
        yn = ya + h * e1
        if method == HEUN:
            # no corrector on steps that land on sigma = 0, where eps is undefined
            corr = np.nonzero(sb > 0)[0]
            if len(corr):
                yp = yn[corr]
                e2 = eps_at(k, rows[corr], yp, sb[corr])
                yn[corr] = ya[corr] + 0.5 * h[corr] * (e1[corr] + e2)
        if not np.all(np.isfinite(yn)):
            raise DivergenceError(k, rows[~np.all(np.isfinite(yn), axis=1)].tolist())
        y[rows] = yn
        cur_t[rows] = np.where(k + 1 == nk, t1[rows], schedule.t_of_sigma(sb))
        if record:
            times.append(cur_t.copy())
            xs = states[-1].copy()
            xs[rows] = schedule.from_scaled(yn, sb)
            states.append(xs)
    x_end = schedule.from_scaled(y, s1)
    return x_end, times, states


def flow(schedule: NoiseSchedule, field: ScoreField, x_start, t_from, t_to, cfg: SolverConfig):
    """Endpoint of the PF-ODE started at ``x_start``; per-row times allowed."""
    x_end, _ = _integrate(schedule, field, x_start, t_from, t_to, cfg, record=False)
    return x_end


def integrate(schedule: NoiseSchedule, field: ScoreField, x_start, t_from, t_to, cfg: SolverConfig):
    """Integrate the PF-ODE from ``t_from`` to ``t_to`` (either order); returns (x_end, Trajectory)."""
    return _integrate(schedule, field, x_start, t_from, t_to, cfg, record=True)


def _integrate(schedule, field, x_start, t_from, t_to, cfg, record):
    x, single = as_rows(x_start)
    nrow = len(x)
    t0 = row_times(t_from, nrow)
    t1 = row_times(t_to, nrow)
    schedule._check(t0)
    schedule._check(t1)
    n = cfg.steps_for(np.maximum(t0, t1), schedule.T)
    n = np.where(t0 == t1, 0, n)
    if cfg.parameterization == NATIVE:
        x_end, times, states = _native_flow(schedule, field, x, t0, t1, n, cfg.method, record)
    else:
        x_end, times, states = _sigma_flow(schedule, field, x, t0, t1, n, cfg.method, record)
    if not record:
        return (x_end[0] if single else x_end), None
    scalar_times = np.ndim(t_from) == 0 and np.ndim(t_to) == 0
    times = np.array(times)
    states = np.array(states)
    if scalar_times:
        times = times[:, 0]
    if single:
        states = states[:, 0, :]
        times = times if times.ndim == 1 else times[:, 0]
    direction = "forward" if np.all(t1 >= t0) else ("reverse" if np.all(t1 <= t0) else "mixed")
    return (x_end[0] if single else x_end), Trajectory(times, states, direction)


def posterior_mean(schedule: NoiseSchedule, field: ScoreField, x_t, t):
    """(x_t - sqrt(1 - alpha_t) eps) / sqrt(alpha_t); for VE x_t - sigma_t eps."""
    xb, single = as_rows(x_t)
    tb = row_times(t, len(xb))
    if np.any(tb <= 0):
        raise SingularScalingError("posterior mean needs t > 0")
    e = field.eps(xb, tb)
    out = (xb - _col(schedule.noise_std(tb)) * e) / _col(schedule.sqrt_alpha(tb))
    return out[0] if single else out


def sigma_reparam_step(schedule: NoiseSchedule, field: ScoreField, x_scaled, sigma_from, sigma_to):
    """One Euler step of dx~/dsigma = eps in the scaled state."""
    top = float(schedule.sigma(schedule.T))
    for s in (sigma_from, sigma_to):
        if np.any(np.asarray(s) < 0) or np.any(np.asarray(s) > top * (1 + 1e-12)):
            raise ScheduleDomainError(f"sigma {s} outside [0, {top}]")
    xb, single = as_rows(x_scaled)
    sf = row_times(sigma_from, len(xb))
    st = row_times(sigma_to, len(xb))
    if np.all(sf == st):
        return x_scaled
    e = field.eps(schedule.from_scaled(xb, sf), schedule.t_of_sigma(sf))
    out = xb + _col(st - sf) * e
    return out[0] if single else out


def frozen_flow_jacobian(
    schedule: NoiseSchedule,
    field: ScoreField,
    x,
    s: float,
    t: float,
    fd_step: float = 1e-4,
    frozen: bool = True,
    cfg: Optional[SolverConfig] = None,
):
    """Central-difference Jacobian of the flow map from time s to t at the point x.

    With ``frozen`` the score values are pinned to those seen along the base
    trajectory, so the perturbed flows only feel the linear drift.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    if d > 4:
        raise ValueError("frozen_flow_jacobian is a diagnostic for d <= 4")
    cfg = cfg or SolverConfig.fixed(400)
    n = cfg.steps_for(np.array([max(s, t)]), schedule.T)
    t0, t1 = np.array([float(s)]), np.array([float(t)])

    if frozen:
        recorded = {}

        def rec(k, stage, rows, xs, ts):
            val = field.score(xs, ts)
            recorded[(k, stage)] = val
            return val

        _native_flow(schedule, field, x[None], t0, t1, n, cfg.method, False, score_hook=rec)
        hook = lambda k, stage, rows, xs, ts: recorded[(k, stage)]
    else:
        hook = None

    def phi(y):
        return _native_flow(schedule, field, y[None], t0, t1, n, cfg.method, False, score_hook=hook)[0][0]

    J = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = fd_step
        J[:, j] = (phi(x + e) - phi(x - e)) / (2 * fd_step)
    return J
