"""Dependency-free SVG scatter plots of 2-D particle ensembles."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

from .score_fields import GaussianMixture, RingSpec


def _num(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


class Viewport:
    """Affine map from the square ``bounds`` x ``bounds`` to a pixel box (y axis up)."""

    def __init__(self, bounds: Tuple[float, float], size: float, x0: float = 0.0, y0: float = 0.0):
        lo, hi = float(bounds[0]), float(bounds[1])
        if not hi > lo:
            raise ValueError("bounds must satisfy lo < hi")
        self.lo, self.hi, self.size, self.x0, self.y0 = lo, hi, float(size), float(x0), float(y0)
        self.scale = self.size / (hi - lo)

    def __call__(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        u = self.x0 + (p[:, 0] - self.lo) * self.scale
        v = self.y0 + (self.hi - p[:, 1]) * self.scale
        return np.stack([u, v], axis=1)


def _target_marks(target, vp: Viewport) -> list:
    out = []
    if isinstance(target, RingSpec):
        c = vp([[0.0, 0.0]])[0]
        for r in target.radii:
            out.append(
                f'<circle class="ring" cx="{_num(c[0])}" cy="{_num(c[1])}" r="{_num(r * vp.scale)}" '
                'fill="none" stroke="#888" stroke-width="0.6"/>'
            )
    elif isinstance(target, GaussianMixture) and target.dim == 2:
        for m, v in zip(vp(target.means), np.sqrt(np.max(np.linalg.eigvalsh(target.covariances), axis=1))):
            out.append(
                f'<circle class="ring" cx="{_num(m[0])}" cy="{_num(m[1])}" r="{_num(2 * v * vp.scale)}" '
                'fill="none" stroke="#888" stroke-width="0.6"/>'
            )
    return out


def _panel(positions, target, vp: Viewport, point_size: float, title: Optional[str]) -> list:
    out = [
        f'<rect x="{_num(vp.x0)}" y="{_num(vp.y0)}" width="{_num(vp.size)}" height="{_num(vp.size)}" '
        'fill="white" stroke="#ccc"/>'
    ]
    out += _target_marks(target, vp)
    x = np.asarray(positions, dtype=float).reshape(-1, 2)
    inside = np.all((x >= vp.lo) & (x <= vp.hi), axis=1)
    for u, v in vp(x[inside]):
        out.append(f'<circle class="particle" cx="{_num(u)}" cy="{_num(v)}" r="{_num(point_size)}" fill="#1f4e9c"/>')
    if title:
        out.append(
            f'<text x="{_num(vp.x0 + 4)}" y="{_num(vp.y0 + 14)}" font-family="sans-serif" font-size="11">{escape(title)}</text>'
        )
    return out


def _document(width: float, height: float, body: list) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_num(width)}" height="{_num(height)}" '
        f'viewBox="0 0 {_num(width)} {_num(height)}">'
    )
    return "\n".join([head] + body + ["</svg>", ""])


def plot_ensemble(
    positions,
    target,
    bounds: Tuple[float, float],
    out_path,
    size: int = 320,
    point_size: float = 1.2,
    title: Optional[str] = None,
) -> Path:
    """Write one panel: ring outlines (or 2-sigma component circles) and particle dots."""
    x = np.asarray(positions, dtype=float)
    if x.size and (x.ndim != 2 or x.shape[1] != 2):
        raise ValueError("plot_ensemble needs 2-D particles")
    vp = Viewport(bounds, size)
    text = _document(size, size, _panel(x.reshape(-1, 2), target, vp, point_size, title))
    out_path = Path(out_path)
    out_path.write_text(text)
    return out_path


def plot_panels(
    grid: Sequence[Sequence[Tuple[str, np.ndarray]]],
    target,
    bounds: Tuple[float, float],
    out_path,
    size: int = 240,
    point_size: float = 1.0,
    layout: str = "rows",
) -> Path:
    """Figure grid: ``grid[i]`` is one method's list of (title, positions) panels."""
    gap = 6
    n_major = len(grid)
    n_minor = max((len(r) for r in grid), default=0)
    rows, cols = (n_major, n_minor) if layout == "rows" else (n_minor, n_major)
    body = []
    for i, series in enumerate(grid):
        for j, (title, pos) in enumerate(series):
            r, c = (i, j) if layout == "rows" else (j, i)
            vp = Viewport(bounds, size, gap + c * (size + gap), gap + r * (size + gap))
            body += _panel(pos, target, vp, point_size, title)
    out_path = Path(out_path)
    out_path.write_text(_document(gap + cols * (size + gap), gap + rows * (size + gap), body))
    return out_path
