"""Config-driven toy experiments: the three-method comparison and the CFG ablation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .distillation import (
    METHODS,
    PFD,
    PRIOR_SURROGATE,
    DistillationConfig,
    DistillationDiverged,
    ParticleEnsemble,
    Prior,
    run_distillation,
)
from .metrics import grid_kl, random_directions, ring_coverage, sliced_wasserstein
from .plotting import plot_ensemble, plot_panels
from .records import MethodRecord, MetricsRow, RunManifest, write_metrics, write_snapshot
from .score_fields import MixtureField, NetworkField, RingSpec, ScoreNetwork, train_dsm

log = logging.getLogger(__name__)

# independent random streams derived from the master seed
_INIT, _PRIOR, _METHOD, _METRICS = 0, 1, 2, 3


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *key]))


def initial_positions(cfg: ExperimentConfig) -> np.ndarray:
    """N(0, I) scaled to ``init_scale`` times the outer target radius."""
    d = cfg.target_mixture.dim
    return stream(cfg.seed, _INIT).standard_normal((cfg.n_particles, d)) * (cfg.init_scale * cfg.outer_radius)


def _needs_unconditional(cfg: ExperimentConfig, configs) -> bool:
    return any(c.gamma_rev != 1.0 or c.q_score_mode == PRIOR_SURROGATE for c in configs)


def _pretrain(samples, schedule, spec, rng) -> ScoreNetwork:
    scale = float(np.sqrt(np.mean(np.var(samples, axis=0))))
    net = ScoreNetwork.default(samples.shape[1], spec.hidden, spec.depth, activation=spec.activation, data_scale=scale, rng=rng)
    train_dsm(samples, schedule, net, spec.pretrain_steps, spec.pretrain_lr, rng, batch_size=spec.pretrain_batch)
    return net


def build_prior(cfg: ExperimentConfig, schedule, configs: Optional[List[DistillationConfig]] = None) -> Prior:
    """Conditional field = target; unconditional = target with broadened covariances.

    A ``learned`` prior pre-trains a network on samples of each (the
    unconditional one only when some run actually guides with it).
    """
    mix = cfg.target_mixture
    broad = mix.broadened(cfg.prior.broadening)
    if cfg.prior.kind == "analytic":
        return Prior(MixtureField(mix, schedule), MixtureField(broad, schedule))
    configs = list(cfg.distillation.values()) if configs is None else configs
    rng = stream(cfg.seed, _PRIOR)
    n = cfg.prior.pretrain_samples
    cond = NetworkField(_pretrain(mix.sample(n, rng), schedule, cfg.prior, rng), schedule)
    uncond = None
    if _needs_unconditional(cfg, configs):
        uncond = NetworkField(_pretrain(broad.sample(n, rng), schedule, cfg.prior, rng), schedule)
    return Prior(cond, uncond)


class Evaluator:
    """Snapshot metrics against a fixed, seeded reference sample of the target."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.mix = cfg.target_mixture
        rng = stream(cfg.seed, _METRICS)
        self.reference = self.mix.sample(cfg.metrics.reference_samples, rng)
        self.directions = random_directions(self.mix.dim, cfg.metrics.sw_projections, rng)

    def coverage(self, positions):
        if not isinstance(self.cfg.target, RingSpec) or positions.shape[1] != 2:
            return None
        m = self.cfg.metrics
        return ring_coverage(positions, self.cfg.target, m.band_width, m.n_angle_bins)

    def row(self, method: str, tau: int, positions) -> Tuple[MetricsRow, Optional[dict]]:
        positions = np.asarray(positions, dtype=float)
        m = self.cfg.metrics
        sw = sliced_wasserstein(positions, self.reference, directions=self.directions)
        kl = math.nan
        if self.mix.dim <= 2:
            lo, hi = m.kl_bounds
            kl = grid_kl(positions, self.mix, ((lo,) * self.mix.dim, (hi,) * self.mix.dim), m.kl_resolution, m.kl_bandwidth)
        cov = self.coverage(positions)
        occ = math.nan if cov is None else cov.occupancy
        collapsed = False if cov is None else cov.collapsed
        report = None if cov is None else json.loads(cov.to_json())
        return MetricsRow(method, int(tau), sw, kl, occ, collapsed), report


def _snapshot_name(method: str, tau: int, ext: str) -> str:
    return f"{method}_tau{tau:06d}.{ext}"


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunManifest:
    """Run every configured method from the same initial ensemble.

    Writes, under the output directory: ``snapshots/*.csv``, ``plots/*.svg``
    (one per snapshot plus ``panels.svg``), ``metrics.csv``, ``coverage.json``
    and ``manifest.json``.  A diverging method is recorded as failed; the
    others still run.
    """
    t_start = time.perf_counter()
    root = Path(out_dir if out_dir is not None else cfg.out_dir)
    (root / "snapshots").mkdir(parents=True, exist_ok=True)
    (root / "plots").mkdir(parents=True, exist_ok=True)
    schedule = cfg.schedule.build()
    manifest = RunManifest(cfg.digest(), __version__, cfg.seed)

    t0 = time.perf_counter()
    configs = [cfg.distillation[m] for m in cfg.methods]
    prior = build_prior(cfg, schedule, configs)
    manifest.timings["prior"] = round(time.perf_counter() - t0, 3)
    evaluator = Evaluator(cfg)
    x_init = initial_positions(cfg)

    rows: List[MetricsRow] = []
    coverage: Dict[str, Dict[str, dict]] = {}
    panels = []
    for method in cfg.methods:
        rec = MethodRecord()
        manifest.methods[method] = rec
        series = []
        coverage[method] = {}

        def hook(tau, pos, method=method, rec=rec, series=series):
            name = _snapshot_name(method, tau, "csv")
            write_snapshot(root / "snapshots" / name, tau, pos)
            rec.snapshots.append(f"snapshots/{name}")
            svg = _snapshot_name(method, tau, "svg")
            plot_ensemble(pos, cfg.target, cfg.plot.bounds, root / "plots" / svg, cfg.plot.panel_px, cfg.plot.point_size, f"{method.upper()}  tau={tau}")
            rec.plots.append(f"plots/{svg}")
            row, report = evaluator.row(method, tau, pos)
            rows.append(row)
            if report is not None:
                coverage[method][str(tau)] = report
            series.append((f"{method.upper()}  tau={tau}", pos))
            log.info("%s tau=%d sw=%.4f kl=%.4f occupancy=%.3f", method, tau, row.sw_dist, row.kl, row.occupancy)

        t0 = time.perf_counter()
        ens = ParticleEnsemble.seeded(x_init, 0)
        ens.rng = stream(cfg.seed, _METHOD, METHODS.index(method))
        try:
            run_distillation(ens, schedule, prior, cfg.distillation[method], hook)
        except DistillationDiverged as exc:
            rec.status = "failed"
            rec.error = str(exc)
            dump = _snapshot_name(method, exc.iteration, "diverged.csv")
            write_snapshot(root / "snapshots" / dump, exc.iteration, exc.positions)
            manifest.extra_files.append(f"snapshots/{dump}")
            manifest.status = "failed"
            log.error("%s diverged: %s", method, exc)
        rec.seconds = round(time.perf_counter() - t0, 3)
        manifest.timings[method] = rec.seconds
        panels.append(series)

    write_metrics(root / "metrics.csv", rows)
    manifest.metrics_file = "metrics.csv"
    (root / "coverage.json").write_text(json.dumps(coverage, indent=2, sort_keys=True) + "\n")
    plot_panels(panels, cfg.target, cfg.plot.bounds, root / "plots" / "panels.svg", cfg.plot.panel_px, cfg.plot.point_size, cfg.plot.layout)
    manifest.extra_files += ["coverage.json", "plots/panels.svg"]
    manifest.timings["total"] = round(time.perf_counter() - t_start, 3)
    manifest.finalize(root)
    manifest.write(root / "manifest.json")
    return manifest


def _pair_label(gf: float, gr: float) -> str:
    return f"pfd_gf{gf:g}_gr{gr:g}"


@dataclass
class AblationEntry:
    gamma_fwd: float
    gamma_rev: float
    row: MetricsRow
    status: str
    flagged: bool = False


def ablate_cfg(cfg: ExperimentConfig, out_dir=None) -> Tuple[RunManifest, List[AblationEntry]]:
    """PFD once per (gamma_fwd, gamma_rev) pair; flags pairs whose final KL exceeds twice the best.

    Every pair starts from the run's shared initial ensemble and uses the same
    random stream as the PFD method in :func:`run_experiment`, so a single
    pair reproduces that run.  A diverging pair counts as failed with infinite
    KL.
    """
    if not cfg.cfg_pairs:
        raise ValueError("ablation.pairs is empty")
    t_start = time.perf_counter()
    root = Path(out_dir if out_dir is not None else cfg.out_dir)
    (root / "snapshots").mkdir(parents=True, exist_ok=True)
    (root / "plots").mkdir(parents=True, exist_ok=True)
    schedule = cfg.schedule.build()
    manifest = RunManifest(cfg.digest(), __version__, cfg.seed)
    base = cfg.distillation[PFD]
    configs = [replace(base, gamma_fwd=gf, gamma_rev=gr) for gf, gr in cfg.cfg_pairs]
    t0 = time.perf_counter()
    prior = build_prior(cfg, schedule, configs)
    manifest.timings["prior"] = round(time.perf_counter() - t0, 3)
    evaluator = Evaluator(cfg)
    x_init = initial_positions(cfg)

    entries: List[AblationEntry] = []
    for (gf, gr), dcfg in zip(cfg.cfg_pairs, configs):
        label = _pair_label(gf, gr)
        rec = MethodRecord()
        manifest.methods[label] = rec
        dcfg.snapshot_iterations = ()
        ens = ParticleEnsemble.seeded(x_init, 0)
        ens.rng = stream(cfg.seed, _METHOD, METHODS.index(PFD))
        t0 = time.perf_counter()
        try:
            final = run_distillation(ens, schedule, prior, dcfg).positions
            row, _ = evaluator.row(label, dcfg.iterations, final)
            name = _snapshot_name(label, dcfg.iterations, "csv")
            write_snapshot(root / "snapshots" / name, dcfg.iterations, final)
            rec.snapshots.append(f"snapshots/{name}")
            svg = _snapshot_name(label, dcfg.iterations, "svg")
            plot_ensemble(final, cfg.target, cfg.plot.bounds, root / "plots" / svg, cfg.plot.panel_px, cfg.plot.point_size, f"fwd {gf:g} / rev {gr:g}")
            rec.plots.append(f"plots/{svg}")
            status = "ok"
        except DistillationDiverged as exc:
            row = MetricsRow(label, exc.iteration, math.inf, math.inf, math.nan, True)
            rec.status, rec.error, status = "failed", str(exc), "failed"
            log.warning("pair (%g, %g) diverged at iteration %d", gf, gr, exc.iteration)
        rec.seconds = round(time.perf_counter() - t0, 3)
        manifest.timings[label] = rec.seconds
        entries.append(AblationEntry(gf, gr, row, status))
        log.info("pair (%g, %g): kl=%.4f occupancy=%.3f", gf, gr, row.kl, row.occupancy)

    finite = [e.row.kl for e in entries if math.isfinite(e.row.kl)]
    best = min(finite) if finite else math.inf
    for e in entries:
        e.flagged = not (e.row.kl <= 2.0 * best)
    write_metrics(
        root / "metrics.csv",
        [e.row for e in entries],
        {
            "gamma_fwd": [repr(e.gamma_fwd) for e in entries],
            "gamma_rev": [repr(e.gamma_rev) for e in entries],
            "status": [e.status for e in entries],
            "flagged": [str(e.flagged).lower() for e in entries],
        },
    )
    manifest.metrics_file = "metrics.csv"
    summary = {
        "best_kl": best if math.isfinite(best) else None,
        "best_pair": next(([e.gamma_fwd, e.gamma_rev] for e in entries if e.row.kl == best), None),
        "flagged": [[e.gamma_fwd, e.gamma_rev] for e in entries if e.flagged],
        "failed": [[e.gamma_fwd, e.gamma_rev] for e in entries if e.status == "failed"],
    }
    (root / "ablation_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    manifest.extra_files.append("ablation_summary.json")
    if summary["failed"]:
        manifest.status = "failed"
    manifest.timings["total"] = round(time.perf_counter() - t_start, 3)
    manifest.finalize(root)
    manifest.write(root / "manifest.json")
    return manifest, entries
