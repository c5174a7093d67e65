"""Common score-field interface and the score <-> noise-prediction conversion."""

import numpy as np

from ..schedules import NoiseSchedule, _col


class SingularScalingError(ValueError):
    """The score/noise conversion is undefined at t = 0."""


class NonFiniteInputError(ValueError):
    pass


def _noise_std(schedule: NoiseSchedule, t):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0.0):
        raise SingularScalingError("score <-> eps conversion needs t > 0")
    return _col(schedule.noise_std(t))


def eps_from_score(schedule: NoiseSchedule, score, t):
    return -_noise_std(schedule, t) * np.asarray(score, dtype=float)


def score_from_eps(schedule: NoiseSchedule, eps, t):
    return -np.asarray(eps, dtype=float) / _noise_std(schedule, t)


def as_rows(x):
    """Promote a single point to a (1, d) batch; returns (batch, was_single)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ValueError(f"expected a point or an (n, d) batch, got shape {x.shape}")
    return x, False


def row_times(t, n):
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return np.full(n, float(t))
    if t.shape != (n,):
        raise ValueError(f"times shape {t.shape} does not match batch of {n}")
    return t


class ScoreField:
    """A time-dependent score ``grad_x log rho_t(x)`` over batches of points.

    Subclasses implement :meth:`_score_rows` on an ``(n, d)`` batch with one time
    per row.  ``eps`` is the derived noise-prediction view.
    """

    schedule: NoiseSchedule
    dim: int

    def _score_rows(self, x, t):
        raise NotImplementedError

    def score(self, x, t):
        xb, single = as_rows(x)
        if xb.shape[1] != self.dim:
            raise ValueError(f"field has dimension {self.dim}, got points of dimension {xb.shape[1]}")
        s = self._score_rows(xb, row_times(t, xb.shape[0]))
        return s[0] if single else s

    def eps(self, x, t):
        xb, single = as_rows(x)
        tb = row_times(t, xb.shape[0])
        e = self._eps_rows(xb, tb)
        return e[0] if single else e

    def _eps_rows(self, x, t):
        return eps_from_score(self.schedule, self.score(x, t), t)
