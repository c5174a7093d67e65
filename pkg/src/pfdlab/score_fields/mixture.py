"""Analytic Gaussian-mixture score fields and concentric-ring targets."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .. import _kernels
from ..schedules import VE, NoiseSchedule
from .base import NonFiniteInputError, ScoreField, as_rows, row_times

_LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d, d)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covariances, dtype=float)
        K, d = mu.shape
        if cov.shape != (K, d, d):
            raise ValueError(f"covariances must have shape {(K, d, d)}, got {cov.shape}")
        if w.shape != (K,) or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-12):
            raise ValueError("covariances must be symmetric")
        lam, Q = np.linalg.eigh(cov)
        if np.any(lam <= 0):
            raise ValueError("covariances must be positive definite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)
        object.__setattr__(self, "_eig", (lam, Q))
        iso = None
        diag = cov[:, np.arange(d), np.arange(d)]
        off = cov - diag[:, :, None] * np.eye(d)[None]
        if not np.any(off) and np.all(diag == diag[:, :1]):
            iso = diag[:, 0].copy()
        object.__setattr__(self, "_iso", iso)

    @classmethod
    def isotropic(cls, weights, means, stds) -> "GaussianMixture":
        means = np.atleast_2d(np.asarray(means, dtype=float))
        K, d = means.shape
        stds = np.broadcast_to(np.asarray(stds, dtype=float), (K,))
        cov = (stds**2)[:, None, None] * np.eye(d)[None]
        return cls(weights, means, cov)

    @classmethod
    def gaussian(cls, mean, std) -> "GaussianMixture":
        return cls.isotropic([1.0], [np.atleast_1d(mean)], [std])

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def isotropic_variances(self) -> Optional[np.ndarray]:
        return self._iso

    def broadened(self, factor: float = 4.0) -> "GaussianMixture":
        return GaussianMixture(self.weights, self.means, self.covariances * factor)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        L = np.linalg.cholesky(self.covariances)
        return self.means[comp] + np.einsum("nij,nj->ni", L[comp], z)

    def log_density(self, x) -> np.ndarray:
        xb, single = as_rows(x)
        _, logd = _evaluate(self, xb, np.ones(len(xb)), np.zeros(len(xb)))
        return logd[0] if single else logd

    def density(self, x) -> np.ndarray:
        return np.exp(self.log_density(x))

    def to_json(self) -> str:
        return json.dumps(
            {
                "weights": self.weights.tolist(),
                "means": self.means.tolist(),
                "covariances": self.covariances.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixture":
        obj = json.loads(text)
        return cls(np.array(obj["weights"]), np.array(obj["means"]), np.array(obj["covariances"]))


def _evaluate(mix: GaussianMixture, x, sqrt_alpha, nu):
    """Score and log-density of the mixture pushed through x -> sqrt_alpha x + sqrt(nu) z, per row."""
    if not np.all(np.isfinite(x)):
        raise NonFiniteInputError("non-finite point passed to mixture score")
    logw = np.log(mix.weights)
    if mix.isotropic_variances is not None:
        return _kernels.iso_mixture(x, sqrt_alpha, nu, mix.means, mix.isotropic_variances, logw)
    # general covariances: rotate into each component's eigenbasis
    lam, Q = mix._eig  # (K, d), (K, d, d)
    n, d = x.shape
    alpha = sqrt_alpha**2
    diff = x[:, None, :] - sqrt_alpha[:, None, None] * mix.means[None]  # (n, K, d)
    proj = np.einsum("kji,nkj->nki", Q, diff)
    lam_t = alpha[:, None, None] * lam[None] + nu[:, None, None]
    logp = logw[None] - 0.5 * (proj**2 / lam_t).sum(-1) - 0.5 * np.log(lam_t).sum(-1) - 0.5 * d * _LOG2PI
    m = logp.max(axis=1, keepdims=True)
    r = np.exp(logp - m)
    tot = r.sum(axis=1, keepdims=True)
    resp = r / tot
    score = -np.einsum("nk,kij,nkj->ni", resp, Q, proj / lam_t)
    return score, m[:, 0] + np.log(tot[:, 0])


def _kernel_coefficients(schedule: NoiseSchedule, t):
    sa = schedule.sqrt_alpha(t)
    if schedule.kind == VE:
        nu = schedule.sigma(t) ** 2
    else:
        nu = schedule.noise_std(t) ** 2
    return np.asarray(sa, dtype=float), np.asarray(nu, dtype=float)


def noised_mixture(base: GaussianMixture, schedule: NoiseSchedule, t: float) -> GaussianMixture:
    sa, nu = _kernel_coefficients(schedule, float(t))
    d = base.dim
    return GaussianMixture(base.weights, sa * base.means, sa * sa * base.covariances + nu * np.eye(d)[None])


def mixture_score(mix: GaussianMixture, x) -> np.ndarray:
    xb, single = as_rows(x)
    if xb.shape[1] != mix.dim:
        raise ValueError("dimension mismatch")
    s, _ = _evaluate(mix, xb, np.ones(len(xb)), np.zeros(len(xb)))
    return s[0] if single else s


class MixtureField(ScoreField):
    """Exact score of a Gaussian mixture diffused by ``schedule``."""

    def __init__(self, base: GaussianMixture, schedule: NoiseSchedule):
        self.base = base
        self.schedule = schedule
        self.dim = base.dim

    def _score_rows(self, x, t):
        sa, nu = _kernel_coefficients(self.schedule, t)
        return _evaluate(self.base, x, sa, nu)[0]

    def log_density(self, x, t):
        xb, single = as_rows(x)
        sa, nu = _kernel_coefficients(self.schedule, row_times(t, len(xb)))
        out = _evaluate(self.base, xb, sa, nu)[1]
        return out[0] if single else out

    def sample(self, n: int, t: float, rng: np.random.Generator) -> np.ndarray:
        return noised_mixture(self.base, self.schedule, t).sample(n, rng)


# -- concentric rings ---------------------------------------------------------


@dataclass(frozen=True)
class RingSpec:
    radii: tuple
    thickness: Optional[float] = None
    modes_per_ring: int = 64

    def __post_init__(self):
        radii = tuple(float(r) for r in np.atleast_1d(self.radii))
        if not radii or any(r <= 0 for r in radii):
            raise ValueError("ring radii must be positive")
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ValueError("ring radii must be strictly increasing")
        thickness = 0.05 * radii[-1] if self.thickness is None else float(self.thickness)
        if thickness <= 0:
            raise ValueError("thickness must be positive")
        if len(radii) > 1 and thickness >= min(np.diff(radii)):
            raise ValueError("thickness must be smaller than the gap between rings")
        if int(self.modes_per_ring) < 1:
            raise ValueError("modes_per_ring must be >= 1")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "thickness", thickness)
        object.__setattr__(self, "modes_per_ring", int(self.modes_per_ring))

    @property
    def n_rings(self) -> int:
        return len(self.radii)

    @property
    def min_gap(self) -> float:
        return float(min(np.diff(self.radii))) if len(self.radii) > 1 else float(self.radii[0])


def ring_to_mixture(spec: RingSpec) -> GaussianMixture:
    m = spec.modes_per_ring
    ang = 2.0 * np.pi * np.arange(m) / m
    unit = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    means = np.concatenate([r * unit for r in spec.radii])
    K = len(means)
    return GaussianMixture.isotropic(np.full(K, 1.0 / K), means, np.full(K, spec.thickness))


def gaussian_field(mean: Sequence[float], std: float, schedule: NoiseSchedule) -> MixtureField:
    return MixtureField(GaussianMixture.gaussian(mean, std), schedule)
