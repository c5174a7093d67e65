"""Distribution-match diagnostics for particle ensembles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .score_fields import GaussianMixture, RingSpec


def _w2_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact W2 between two 1-D empirical measures (any sizes), via the quantile functions."""
    a = np.sort(a)
    b = np.sort(b)
    if len(a) == len(b):
        return float(np.sqrt(np.mean((a - b) ** 2)))
    # merge the CDF breakpoints of both measures and integrate |F^-1 - G^-1|^2
    qa = np.arange(1, len(a) + 1) / len(a)
    qb = np.arange(1, len(b) + 1) / len(b)
    q = np.union1d(qa, qb)
    w = np.diff(np.concatenate([[0.0], q]))
    ia = np.minimum(np.searchsorted(qa, q, side="left"), len(a) - 1)
    ib = np.minimum(np.searchsorted(qb, q, side="left"), len(b) - 1)
    return float(np.sqrt(np.sum(w * (a[ia] - b[ib]) ** 2)))


def _as_samples(x):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 1) if x.ndim <= 1 else x


def random_directions(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_wasserstein(a, b, n_projections: int = 100, rng: Optional[np.random.Generator] = None, directions=None) -> float:
    """Mean over random unit directions of the 1-D W2 between the projected samples."""
    a, b = _as_samples(a), _as_samples(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("sample sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets must share a dimension")
    if directions is None:
        rng = np.random.default_rng() if rng is None else rng
        directions = random_directions(a.shape[1], n_projections, rng)
    pa = a @ directions.T
    pb = b @ directions.T
    return float(np.mean([_w2_1d(pa[:, k], pb[:, k]) for k in range(len(directions))]))


@dataclass
class CoverageReport:
    band_mass: List[float]
    occupancy: float
    collapsed: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def ring_coverage(samples, spec: RingSpec, band_width: float, n_angle_bins: int = 16) -> CoverageReport:
    """Per-ring band mass, fraction of occupied (ring, angle) bins, and a collapse flag."""
    if spec.n_rings > 1 and not band_width < 0.5 * spec.min_gap:
        raise ValueError("band_width must be below half the smallest ring gap")
    x = np.atleast_2d(np.asarray(samples, dtype=float)).reshape(-1, 2)
    n = max(len(x), 1)
    r = np.hypot(x[:, 0], x[:, 1])
    ang = np.mod(np.arctan2(x[:, 1], x[:, 0]), 2.0 * np.pi)
    bins = np.minimum((ang / (2.0 * np.pi) * n_angle_bins).astype(int), n_angle_bins - 1)
    masses, occupied = [], 0
    for radius in spec.radii:
        inside = np.abs(r - radius) < band_width
        masses.append(float(inside.sum() / n))
        occupied += len(np.unique(bins[inside]))
    occupancy = occupied / (n_angle_bins * spec.n_rings)
    in_band = sum(masses)
    dominant = in_band > 0 and max(masses) > 0.9 * in_band
    return CoverageReport(masses, float(occupancy), bool(dominant or occupancy < 0.5))


def scott_bandwidth(samples) -> float:
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = x.shape
    return float(np.mean(np.std(x, axis=0, ddof=1)) * n ** (-1.0 / (d + 4)))


def _grid_points(bounds, resolution):
    lo, hi = bounds
    d = len(np.atleast_1d(lo))
    axes = [np.linspace(np.atleast_1d(lo)[j], np.atleast_1d(hi)[j], resolution) for j in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def grid_kl(
    samples,
    target: GaussianMixture,
    bounds: Tuple,
    resolution: int = 96,
    bandwidth: Optional[float] = None,
    smooth_target: bool = True,
) -> float:
    """Discrete KL(KDE(samples) || target) on a regular grid.

    With ``smooth_target`` the target is convolved with the same Gaussian kernel
    as the samples (exact for mixtures), so the estimate is not biased by the
    kernel width when the samples do come from the target.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.shape[1] > 2 or target.dim != x.shape[1]:
        raise ValueError("grid_kl supports d <= 2 with matching target dimension")
    h = scott_bandwidth(x) if bandwidth is None else float(bandwidth)
    grid = _grid_points(bounds, resolution)
    p = _kernels.kde(grid, x, h)
    tgt = target
    if smooth_target:
        tgt = GaussianMixture(target.weights, target.means, target.covariances + h * h * np.eye(target.dim)[None])
    q = np.exp(tgt.log_density(grid))
    if p.sum() <= 0 or q.sum() <= 0:
        raise ValueError("grid carries no probability mass")
    p = p / p.sum()
    q = q / q.sum()
    p = np.maximum(p, 1e-12)
    q = np.maximum(q, 1e-12)
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log(p / q)))
