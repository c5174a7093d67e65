"""Classifier-free guidance on noise predictions."""

import numpy as np

from .base import ScoreField, as_rows, row_times


def combine(eps_uncond, eps_cond, gamma: float):
    """(1 - gamma) eps_uncond + gamma eps_cond.

    Written with explicit weights and a commutative final sum, so swapping the
    roles of the two predictions while passing ``1 - gamma`` reproduces the
    result bit for bit whenever ``1 - (1 - gamma) == gamma`` in floating point.
    """
    return (1.0 - gamma) * np.asarray(eps_uncond) + gamma * np.asarray(eps_cond)


class CfgField(ScoreField):
    """Guided field eps_u + gamma (eps_c - eps_u); gamma may be negative."""

    def __init__(self, conditional: ScoreField, unconditional: ScoreField, gamma: float):
        if conditional.dim != unconditional.dim:
            raise ValueError("guided sub-fields must share a dimension")
        self.conditional = conditional
        self.unconditional = unconditional
        self.gamma = float(gamma)
        self.schedule = conditional.schedule
        self.dim = conditional.dim

    def swapped(self) -> "CfgField":
        """Same field with source/target roles exchanged (guidance 1 - gamma)."""
        return CfgField(self.unconditional, self.conditional, 1.0 - self.gamma)

    def _eps_rows(self, x, t):
        return combine(self.unconditional.eps(x, t), self.conditional.eps(x, t), self.gamma)

    def _score_rows(self, x, t):
        # eps and score differ by a per-time factor, so guidance commutes with the
        # conversion; combining scores keeps t = 0 evaluable.
        return combine(self.unconditional.score(x, t), self.conditional.score(x, t), self.gamma)


def cfg_combine(field: CfgField, x, t):
    xb, single = as_rows(x)
    e = field._eps_rows(xb, row_times(t, len(xb)))
    return e[0] if single else e
