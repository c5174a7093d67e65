"""Small MLP noise predictor trained by denoising score matching.

Forward and reverse passes are written out by hand; no autodiff framework.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from ..schedules import NoiseSchedule, perturb
from .base import ScoreField, score_from_eps

_MAGIC = b"PFDN"


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s * (1.0 + z * (1.0 - s))


def _tanh(z):
    a = np.tanh(z)
    return a, 1.0 - a * a


def _softplus(z):
    return np.logaddexp(0.0, z), 1.0 / (1.0 + np.exp(-z))


ACTIVATIONS = {"silu": _silu, "tanh": _tanh, "softplus": _softplus}


class TrainingDiverged(RuntimeError):
    pass


class ScoreNetwork:
    """Preconditioned MLP noise predictor.

    With ``y = x / sqrt(alpha_t)``, ``s = data_scale`` and raw output ``F`` of the
    MLP on ``(c_in(t) x, t/T)``::

        eps(x, t) = sigma (y + s F) / (sigma^2 + s^2)
        c_in(t)   = 1 / (sqrt(alpha_t) sqrt(s^2 + sigma^2))

    ``F = 0`` is the exact noise of ``N(0, s^2 I)`` data, and the implied score
    ``-(y + s F) / (sqrt(alpha_t) (sigma^2 + s^2))`` carries no ``1/sigma``
    amplification of the MLP's error at small noise levels.
    """

    def __init__(self, widths: Sequence[int], activation: str = "silu", data_scale: float = 1.0, rng=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"bad layer widths {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self.data_scale = float(data_scale)
        rng = np.random.default_rng(0) if rng is None else rng
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self.weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in))
            self.biases.append(np.zeros(fan_out))
        self.weights[-1] *= 0.1
        self._velocity = [np.zeros_like(p) for p in self.params]
        self.loss_history: List[float] = []

    @classmethod
    def default(cls, dim: int, hidden: int = 64, depth: int = 2, **kw) -> "ScoreNetwork":
        return cls([dim + 1] + [hidden] * depth + [dim], **kw)

    @property
    def dim(self) -> int:
        return self.widths[-1]

    @property
    def params(self) -> List[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "ScoreNetwork":
        other = ScoreNetwork.__new__(ScoreNetwork)
        other.widths = list(self.widths)
        other.activation = self.activation
        other.data_scale = self.data_scale
        other.weights = [W.copy() for W in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other._velocity = [v.copy() for v in self._velocity]
        other.loss_history = list(self.loss_history)
        return other

    # -- evaluation -------------------------------------------------------

    def inputs(self, schedule: NoiseSchedule, x, t):
        t = np.asarray(t, dtype=float)
        c_in = 1.0 / (schedule.sqrt_alpha(t) * np.sqrt(self.data_scale**2 + schedule.sigma(t) ** 2))
        return np.concatenate([x * c_in[:, None], (t / schedule.T)[:, None]], axis=1)

    def forward(self, h, keep: bool = False):
        act = ACTIVATIONS[self.activation]
        cache = []
        L = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            if i < L - 1:
                a, da = act(z)
                if keep:
                    cache.append((h, da))
                h = a
            else:
                if keep:
                    cache.append((h, None))
                h = z
        return (h, cache) if keep else h

    def backward(self, cache, grad_out):
        """Gradients of a scalar loss w.r.t. every parameter, given dL/d(output)."""
        grads = []
        g = grad_out
        for i in reversed(range(len(self.weights))):
            h_in, da = cache[i]
            if da is not None:
                g = g * da
            grads.append(g.sum(axis=0))
            grads.append(h_in.T @ g)
            if i > 0:
                g = g @ self.weights[i].T
        grads.reverse()
        return grads  # [dW0, db0, dW1, db1, ...]

    def output_map(self, schedule: NoiseSchedule, x, t):
        """``(skip, c_out)`` with ``eps = skip + c_out * F``."""
        t = np.asarray(t, dtype=float)
        sig = schedule.sigma(t)
        denom = sig**2 + self.data_scale**2
        skip = x * (sig / (schedule.sqrt_alpha(t) * denom))[:, None]
        return skip, (sig * self.data_scale / denom)[:, None]

    def predict_eps(self, schedule: NoiseSchedule, x, t):
        skip, c_out = self.output_map(schedule, x, t)
        return skip + c_out * self.forward(self.inputs(schedule, x, t))

    # -- serialization ----------------------------------------------------

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {
                "widths": self.widths,
                "activation": self.activation,
                "data_scale": self.data_scale,
                "dtype": "<f8",
                "order": "W0,b0,W1,b1,... row-major, W shaped (fan_in, fan_out)",
            }
        ).encode()
        blob = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in self.params)
        return _MAGIC + struct.pack("<I", len(header)) + header + blob

    @classmethod
    def from_bytes(cls, data: bytes) -> "ScoreNetwork":
        if data[:4] != _MAGIC:
            raise ValueError("not a score-network blob")
        (n,) = struct.unpack("<I", data[4:8])
        header = json.loads(data[8 : 8 + n])
        net = cls(header["widths"], header["activation"], header["data_scale"])
        flat = np.frombuffer(data[8 + n :], dtype="<f8")
        expected = sum(p.size for p in net.params)
        if flat.size != expected:
            raise ValueError(f"blob holds {flat.size} values, expected {expected}")
        pos = 0
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            net.weights[i] = flat[pos : pos + W.size].reshape(W.shape).astype(float)
            pos += W.size
            net.biases[i] = flat[pos : pos + b.size].astype(float)
            pos += b.size
        net._velocity = [np.zeros_like(p) for p in net.params]
        return net

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ScoreNetwork":
        return cls.from_bytes(Path(path).read_bytes())


def dsm_loss_and_grad(net: ScoreNetwork, schedule: NoiseSchedule, x_t, t, eps):
    """Mean over the batch of ||eps - eps_net(x_t, t)||^2 and its parameter gradients."""
    out, cache = net.forward(net.inputs(schedule, x_t, t), keep=True)
    skip, c_out = net.output_map(schedule, x_t, t)
    r = skip + c_out * out - eps
    n = len(r)
    loss = float(np.sum(r * r) / n)
    grads = net.backward(cache, 2.0 * c_out * r / n)
    return loss, grads


def train_dsm(
    samples,
    schedule: NoiseSchedule,
    net: ScoreNetwork,
    steps: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 128,
    momentum: float = 0.9,
    t_range: Optional[tuple] = None,
) -> ScoreNetwork:
    """Run ``steps`` momentum-SGD updates of the DSM objective in place; returns ``net``."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or len(samples) == 0:
        raise ValueError("need a non-empty (n, d) sample array")
    if samples.shape[1] != net.dim:
        raise ValueError(f"network dimension {net.dim} does not match samples of dimension {samples.shape[1]}")
    lo, hi = t_range if t_range is not None else (schedule.t_min, schedule.t_max)
    n, d = samples.shape
    params = net.params
    for step in range(int(steps)):
        idx = rng.integers(0, n, size=batch_size)
        t = rng.uniform(lo, hi, size=batch_size)
        eps = rng.standard_normal((batch_size, d))
        x_t = perturb(schedule, samples[idx], t, eps)
        loss, grads = dsm_loss_and_grad(net, schedule, x_t, t, eps)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"DSM loss became {loss} at step {step}; last losses {net.loss_history[-5:]}, "
                f"max |param| {max(float(np.abs(p).max()) for p in params):.3g}"
            )
        for p, v, g in zip(params, net._velocity, grads):
            v *= momentum
            v -= lr * g
            p += v
        net.loss_history.append(loss)
    return net


class NetworkField(ScoreField):
    """Score view of a learned noise predictor; times below ``t_min`` are clamped."""

    def __init__(self, net: ScoreNetwork, schedule: NoiseSchedule):
        self.net = net
        self.schedule = schedule
        self.dim = net.dim

    def _clamp(self, t):
        return np.clip(t, self.schedule.t_min, self.schedule.T)

    def _eps_rows(self, x, t):
        return self.net.predict_eps(self.schedule, x, self._clamp(t))

    def _score_rows(self, x, t):
        tc = self._clamp(t)
        return score_from_eps(self.schedule, self.net.predict_eps(self.schedule, x, tc), tc)
