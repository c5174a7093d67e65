"""TOML experiment configuration: parsing, validation and canonical hashing."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .distillation import METHODS, DistillationConfig
from .schedules import NoiseSchedule
from .score_fields import GaussianMixture, RingSpec, ring_to_mixture
from .solvers import SolverConfig


class ConfigError(ValueError):
    """Validation failure; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass
class ScheduleSpec:
    kind: str = "ve"
    T: float = 1.0
    sigma_max: float = 5.0
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: Optional[float] = None
    t_max: Optional[float] = None

    def build(self) -> NoiseSchedule:
        kw = {k: v for k, v in (("t_min", self.t_min), ("t_max", self.t_max)) if v is not None}
        if self.kind == "ve":
            return NoiseSchedule.ve(self.sigma_max, self.T, **kw)
        return NoiseSchedule.vp(self.beta_min, self.beta_max, self.T, **kw)


@dataclass
class PriorSpec:
    kind: str = "analytic"  # or "learned"
    broadening: float = 4.0  # unconditional field = target with covariances scaled by this
    pretrain_steps: int = 20000
    pretrain_samples: int = 20000
    pretrain_batch: int = 256
    pretrain_lr: float = 2e-3
    hidden: int = 64
    depth: int = 2
    activation: str = "silu"


@dataclass
class MetricsSpec:
    band_width: float = 0.3
    n_angle_bins: int = 16
    kl_bounds: Tuple[float, float] = (-4.0, 4.0)
    kl_resolution: int = 96
    kl_bandwidth: Optional[float] = 0.15
    sw_projections: int = 64
    reference_samples: int = 2000


@dataclass
class PlotSpec:
    bounds: Tuple[float, float] = (-4.5, 4.5)
    point_size: float = 1.2
    panel_px: int = 240
    layout: str = "rows"  # one row per method, or "columns"


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    schedule: ScheduleSpec
    target: Union[RingSpec, GaussianMixture]
    methods: List[str]
    distillation: Dict[str, DistillationConfig]
    snapshot_iterations: List[int]
    out_dir: str = "runs"
    n_particles: int = 1000
    init_scale: float = 1.5
    prior: PriorSpec = field(default_factory=PriorSpec)
    metrics: MetricsSpec = field(default_factory=MetricsSpec)
    plot: PlotSpec = field(default_factory=PlotSpec)
    cfg_pairs: List[Tuple[float, float]] = field(default_factory=list)
    raw: Dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def target_mixture(self) -> GaussianMixture:
        return ring_to_mixture(self.target) if isinstance(self.target, RingSpec) else self.target

    @property
    def outer_radius(self) -> float:
        if isinstance(self.target, RingSpec):
            return float(max(self.target.radii))
        norms = np.linalg.norm(self.target.means, axis=1)
        return float(max(norms.max(), 1.0))

    def canonical(self) -> Dict[str, Any]:
        out = dict(self.raw)
        out["seed"] = self.seed
        out["out_dir"] = None  # where results land does not change them
        return out

    def digest(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(text.encode()).hexdigest()


def _take(table: dict, cls, path: str):
    """Instantiate dataclass ``cls`` from a TOML table, rejecting unknown keys."""
    names = {f.name for f in fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown key")
    kw = {}
    for f in fields(cls):
        if f.name in table:
            v = table[f.name]
            kw[f.name] = tuple(v) if isinstance(v, list) and "Tuple" in str(f.type) else v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _positive(value, path, integer=False):
    kind = int if integer else (int, float)
    if isinstance(value, bool) or not isinstance(value, kind) or not value > 0:
        raise ConfigError(path, f"must be a positive {'integer' if integer else 'number'}, got {value!r}")


def _solver(table, path) -> SolverConfig:
    if isinstance(table, SolverConfig):
        return table
    if not isinstance(table, dict):
        raise ConfigError(path, "must be a table")
    return _take(table, SolverConfig, path)


def _distillation(base: dict, override: dict, path: str) -> DistillationConfig:
    merged = {**base, **override}
    merged = {k: v for k, v in merged.items() if k not in METHODS}
    for key in ("forward_solver", "reverse_solver"):
        if key in merged:
            merged[key] = _solver(merged[key], f"{path}.{key}")
    if "anneal" in merged and merged["anneal"] is not None:
        a = merged["anneal"]
        if not (isinstance(a, dict) and set(a) == {"switch", "t_max"}):
            raise ConfigError(f"{path}.anneal", "expected a table with keys switch and t_max")
        merged["anneal"] = (a["switch"], a["t_max"])
    if "learning_rate" in merged:
        _positive(merged["learning_rate"], f"{path}.learning_rate")
    if "iterations" in merged:
        it = merged["iterations"]
        if isinstance(it, bool) or not isinstance(it, int) or it < 0:
            raise ConfigError(f"{path}.iterations", f"must be a non-negative integer, got {it!r}")
    return _take(merged, DistillationConfig, path)


def _target(table: dict) -> Union[RingSpec, GaussianMixture]:
    table = dict(table)
    kind = table.pop("kind", "rings")
    try:
        if kind == "rings":
            return _take(table, RingSpec, "target")
        if kind == "mixture":
            stds = table.pop("stds", None)
            if stds is not None:
                return GaussianMixture.isotropic(table["weights"], table["means"], stds)
            return GaussianMixture(table["weights"], table["means"], table["covariances"])
    except KeyError as exc:
        raise ConfigError(f"target.{exc.args[0]}", "missing") from exc
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("target", str(exc)) from exc
    raise ConfigError("target.kind", f"expected 'rings' or 'mixture', got {kind!r}")


def parse_config(raw: dict, seed: Optional[int] = None, out_dir: Optional[str] = None) -> ExperimentConfig:
    """Validate a parsed TOML document; ``seed`` / ``out_dir`` override the file."""
    raw = json.loads(json.dumps(raw))  # plain, detached copy
    known = {
        "name", "seed", "out_dir", "n_particles", "init_scale", "methods", "snapshot_iterations",
        "schedule", "target", "prior", "distillation", "metrics", "plot", "ablation",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    if seed is not None:
        raw["seed"] = int(seed)
    if "seed" not in raw:
        raise ConfigError("seed", "required (runs never draw ambient entropy)")
    if isinstance(raw["seed"], bool) or not isinstance(raw["seed"], int) or raw["seed"] < 0:
        raise ConfigError("seed", f"must be a non-negative integer, got {raw['seed']!r}")
    if out_dir is not None:
        raw["out_dir"] = str(out_dir)

    schedule = _take(raw.get("schedule", {}), ScheduleSpec, "schedule")
    if schedule.kind not in ("ve", "vp"):
        raise ConfigError("schedule.kind", f"expected 've' or 'vp', got {schedule.kind!r}")
    try:
        schedule.build()
    except ValueError as exc:
        raise ConfigError("schedule", str(exc)) from exc
    if "target" not in raw:
        raise ConfigError("target", "required")
    target = _target(raw["target"])
    prior = _take(raw.get("prior", {}), PriorSpec, "prior")
    if prior.kind not in ("analytic", "learned"):
        raise ConfigError("prior.kind", f"expected 'analytic' or 'learned', got {prior.kind!r}")
    metrics = _take(raw.get("metrics", {}), MetricsSpec, "metrics")
    _positive(metrics.band_width, "metrics.band_width")
    if isinstance(target, RingSpec) and target.n_rings > 1 and not metrics.band_width < 0.5 * target.min_gap:
        raise ConfigError("metrics.band_width", "must be below half the smallest ring gap")
    plot = _take(raw.get("plot", {}), PlotSpec, "plot")
    if plot.layout not in ("rows", "columns"):
        raise ConfigError("plot.layout", f"expected 'rows' or 'columns', got {plot.layout!r}")
    if not plot.bounds[0] < plot.bounds[1]:
        raise ConfigError("plot.bounds", "lower bound must be below upper bound")

    methods = raw.get("methods", list(METHODS))
    if not methods or any(m not in METHODS for m in methods) or len(set(methods)) != len(methods):
        raise ConfigError("methods", f"must be a non-empty subset of {list(METHODS)} without repeats")

    dist = raw.get("distillation", {})
    base = {k: v for k, v in dist.items() if k not in METHODS}
    per_method = {m: _distillation(base, dist.get(m, {}), f"distillation.{m}") for m in METHODS}
    per_method = {m: replace_method(c, m) for m, c in per_method.items()}

    snaps = raw.get("snapshot_iterations", [0])
    if not isinstance(snaps, list) or any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in snaps):
        raise ConfigError("snapshot_iterations", "must be a list of non-negative integers")
    if snaps != sorted(snaps) or len(set(snaps)) != len(snaps):
        raise ConfigError("snapshot_iterations", "must be strictly increasing")
    for m in methods:
        if snaps and snaps[-1] > per_method[m].iterations:
            raise ConfigError("snapshot_iterations", f"{snaps[-1]} exceeds distillation.{m}.iterations = {per_method[m].iterations}")
        per_method[m].snapshot_iterations = tuple(snaps)

    n = raw.get("n_particles", 1000)
    _positive(n, "n_particles", integer=True)
    _positive(raw.get("init_scale", 1.5), "init_scale")

    pairs = []
    ablation = raw.get("ablation", {})
    if set(ablation) - {"pairs"}:
        raise ConfigError(f"ablation.{sorted(set(ablation) - {'pairs'})[0]}", "unknown key")
    for i, p in enumerate(ablation.get("pairs", [])):
        if not (isinstance(p, list) and len(p) == 2 and all(isinstance(v, (int, float)) for v in p)):
            raise ConfigError(f"ablation.pairs[{i}]", "expected [gamma_fwd, gamma_rev]")
        pairs.append((float(p[0]), float(p[1])))

    return ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        seed=raw["seed"],
        schedule=schedule,
        target=target,
        methods=list(methods),
        distillation=per_method,
        snapshot_iterations=list(snaps),
        out_dir=str(raw.get("out_dir", "runs")),
        n_particles=int(n),
        init_scale=float(raw.get("init_scale", 1.5)),
        prior=prior,
        metrics=metrics,
        plot=plot,
        cfg_pairs=pairs,
        raw=raw,
    )


def replace_method(cfg: DistillationConfig, method: str) -> DistillationConfig:
    data = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    data["method"] = method
    return DistillationConfig(**data)


def load_config(path, seed: Optional[int] = None, out_dir: Optional[str] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"invalid TOML: {exc}") from exc
    return parse_config(raw, seed=seed, out_dir=out_dir)


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (e.g. ``fig3.toml``)."""
    from importlib import resources

    return Path(str(resources.files("pfdlab") / "configs" / name))
