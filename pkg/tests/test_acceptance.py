"""End-to-end acceptance checks; each prints one PASS/FAIL line.

The lines are also collected in ``RESULTS`` and echoed in pytest's terminal
summary (see conftest.py), so they show up without ``-s``.
"""

import time

import numpy as np
import pytest

from pfdlab.config import bundled_config, load_config, parse_config
from pfdlab.distillation import PFD, SDI, SDS, DistillationConfig, ParticleEnsemble, Prior, pfd_gradient, run_distillation, sdi_gradient
from pfdlab.experiment import run_experiment
from pfdlab.metrics import random_directions, sliced_wasserstein
from pfdlab.oracle import theorem1_check
from pfdlab.records import RunManifest, read_metrics
from pfdlab.schedules import NoiseSchedule, scale_factor
from pfdlab.score_fields import (
    CfgField,
    GaussianMixture,
    MixtureField,
    NetworkField,
    ScoreNetwork,
    gaussian_field,
    train_dsm,
)
from pfdlab.score_fields.guidance import combine
from pfdlab.solvers import EULER, SIGMA, SolverConfig, frozen_flow_jacobian, integrate, posterior_mean

RESULTS = []


def report(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def info(number, detail):
    line = f"INFO criterion {number}: {detail}"
    RESULTS.append(line)
    print(line)


VE = NoiseSchedule.ve(1.0)
VP = NoiseSchedule.vp(0.1, 20.0)
MIX3 = GaussianMixture.isotropic([0.2, 0.3, 0.5], [[-1.5, 0.0], [1.0, 1.0], [0.5, -1.2]], [0.3, 0.5, 0.4])


def test_criterion_1_posterior_mean_is_one_euler_step():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    one = SolverConfig.fixed(1, method=EULER, parameterization=SIGMA)
    worst = 0.0
    for sch in (VE, VP):
        net = ScoreNetwork.default(2, 32, 2, rng=rng)
        for field in (MixtureField(MIX3, sch), NetworkField(net, sch)):
            x = rng.normal(0, 2, (50, 2))
            t = rng.uniform(0.02, 1.0, 50)
            pm = posterior_mean(sch, field, x, t)
            step = integrate(sch, field, x, t, 0.0, one)[0]
            worst = max(worst, float(np.max(np.abs(pm - step) / np.maximum(1.0, np.abs(pm)))))
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-12 and elapsed < 1.0, f"200 points, max error {worst:.1e} (tol 1e-12), {elapsed:.2f} s (limit 1 s)")


def test_criterion_2_theorem1_identity():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    errs, true_errs = [], []
    for _ in range(20):
        q = (rng.uniform(-2, 2), rng.uniform(0.3, 2))
        p = (rng.uniform(-2, 2), rng.uniform(0.3, 2))
        r = theorem1_check(VE, q, p, rng.normal(0, 1.5))
        errs.append(r.rel_err)
        true_errs.append(r.rel_err_true_jacobian)

    q, p, x0 = (1.0, 0.5), (0.0, 1.0), 1.2
    ref = theorem1_check(VE, q, p, x0)
    draws = 100_000
    t = np.random.default_rng(2).uniform(0.0, VE.T, draws)
    cfg = SolverConfig.fixed(200)
    g = pfd_gradient(VE, gaussian_field([p[0]], p[1], VE), gaussian_field([q[0]], q[1], VE), np.full((draws, 1), x0), t, cfg, cfg)
    mc = float(g.delta.mean())
    mc_err = abs(mc - ref.rhs[0]) / abs(ref.rhs[0])
    elapsed = time.perf_counter() - start
    info(2, f"with the true reverse-flow Jacobian in place of c(t,0): max rel_err {max(true_errs):.1e}; "
            f"MC mean vs that rhs {abs(mc - ref.rhs_true_jacobian[0]) / abs(ref.rhs_true_jacobian[0]):.1e}")
    ok = max(errs) < 1e-2 and mc_err < 2e-2 and elapsed < 60
    report(2, ok, f"max rel_err over 20 pairs {max(errs):.3f} (tol 1e-2); MC E_t[Delta] {mc:.4f} vs rhs {ref.rhs[0]:.4f}, "
                  f"rel {mc_err:.3f} (tol 2e-2); {elapsed:.1f} s")


def test_criterion_3_sigma_and_native_reverse_agree():
    start = time.perf_counter()

    def gaps(sch):
        f = gaussian_field([0.5, -0.3], 0.8, sch)
        x = np.random.default_rng(3).normal(size=(100, 2))
        out = []
        for n in (50, 100, 200, 400):
            a = integrate(sch, f, x, sch.T, 0.0, SolverConfig.fixed(n))[0]
            b = integrate(sch, f, x, sch.T, 0.0, SolverConfig.fixed(n, parameterization=SIGMA))[0]
            out.append(float(np.abs(a - b).max()))
        return out

    g = gaps(NoiseSchedule.vp_constant(1.0))
    elapsed = time.perf_counter() - start
    info(3, "linear VP beta 0.1..20 (sigma_max 152), gaps at 50/100/200/400: " + ", ".join(f"{v:.1e}" for v in gaps(VP)))
    ok = g[2] < 1e-4 and all(a > b for a, b in zip(g, g[1:])) and elapsed < 5
    report(3, ok, "VP constant beta=1, gaps at 50/100/200/400 Heun steps: " + ", ".join(f"{v:.1e}" for v in g) + f"; {elapsed:.1f} s")


def test_criterion_4_frozen_jacobian_is_scaled_identity():
    start = time.perf_counter()
    x = np.array([0.4, 0.2])
    errs = []
    for sch, s, t in ((VE, 0.0, 0.8), (VP, 0.1, 0.6), (VP, 0.7, 0.2)):
        J = frozen_flow_jacobian(sch, MixtureField(MIX3, sch), x, s, t)
        errs.append(float(np.linalg.norm(J - scale_factor(sch, s, t) * np.eye(2))))
    J = frozen_flow_jacobian(VE, MixtureField(MIX3, VE), x, 0.0, 0.8, frozen=False)
    contrast = float(np.linalg.norm(J - np.eye(2)))
    elapsed = time.perf_counter() - start
    ok = max(errs) < 1e-3 and contrast >= 10 * 1e-3 and elapsed < 10
    report(4, ok, f"frozen Frobenius error max {max(errs):.1e} (tol 1e-3); unfrozen {contrast:.3f} (needs >= 1e-2); {elapsed:.1f} s")


def test_criterion_5_marginal_preservation():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    field = MixtureField(MIX3, VP)
    n = 10_000
    dirs = random_directions(2, 64, rng)
    parts, ok = [], True
    for frac in (0.25, 0.5, 0.9):
        t = frac * VP.T
        pushed = integrate(VP, field, MIX3.sample(n, rng), 0.0, t, SolverConfig.fixed(200))[0]
        stat = sliced_wasserstein(pushed, field.sample(n, t, rng), directions=dirs)
        base = np.quantile([sliced_wasserstein(field.sample(n, t, rng), field.sample(n, t, rng), directions=dirs) for _ in range(40)], 0.99)
        ok &= stat < base
        parts.append(f"t={frac}T SW {stat:.4f} vs p99 {base:.4f}")
    elapsed = time.perf_counter() - start
    report(5, ok and elapsed < 30, "; ".join(parts) + f"; {elapsed:.1f} s")


def test_criterion_6_negative_cfg_identity():
    rng = np.random.default_rng(6)
    e_u, e_c = rng.normal(size=(1000, 2)), rng.normal(size=(1000, 2))
    g = rng.uniform(0.5, 10.0, 1000)[:, None]
    direct = combine(e_u, e_c, g)
    swapped = combine(e_c, e_u, 1.0 - g)
    mismatches = int(np.sum(direct != swapped))

    sch = VE
    cond, uncond = MixtureField(MIX3, sch), MixtureField(MIX3.broadened(4.0), sch)
    x = rng.normal(0, 2, (1000, 2))
    t = rng.uniform(0.05, 1.0, 1000)
    f = CfgField(cond, uncond, 1.0 - 7.5)
    mismatches += int(np.sum(f.eps(x, t) != f.swapped().eps(x, t)))
    report(6, mismatches == 0, f"{mismatches} bitwise mismatches over 1000 raw inputs and 1000 field evaluations")


@pytest.fixture(scope="module")
def fig3_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("fig3")
    cfg = load_config(bundled_config("fig3.toml"))
    start = time.perf_counter()
    manifest = run_experiment(cfg, out)
    elapsed = time.perf_counter() - start
    rows = read_metrics(out / manifest.metrics_file)
    import json

    coverage = json.loads((out / "coverage.json").read_text())
    return cfg, manifest, rows, coverage, elapsed


def test_criterion_7_figure3_reproduction(fig3_run):
    cfg, manifest, rows, coverage, elapsed = fig3_run
    last = str(cfg.snapshot_iterations[-1])
    final = {m: coverage[m][last] for m in cfg.methods}
    sds, sdi, pfd = final["sds"], final["sdi"], final["pfd"]
    ok = (
        manifest.status == "ok"
        and sds["collapsed"]
        and min(pfd["band_mass"]) >= 0.10
        and pfd["occupancy"] >= 0.8
        and not pfd["collapsed"]
        and sds["occupancy"] < sdi["occupancy"] < pfd["occupancy"]
        and elapsed < 30 * 60
    )
    detail = "; ".join(
        f"{m.upper()} occupancy {final[m]['occupancy']:.3f} bands {[round(b, 3) for b in final[m]['band_mass']]} collapsed={final[m]['collapsed']}"
        for m in cfg.methods
    )
    report(7, ok, f"tau={last}: {detail}; {elapsed / 60:.1f} min")


def test_criterion_8_dsm_fidelity():
    sch = NoiseSchedule.ve(2.0)
    rng = np.random.default_rng(0)
    target = GaussianMixture.gaussian([0.5, -0.5], 0.7)
    net = ScoreNetwork.default(2, 64, 2, data_scale=0.7, rng=rng)
    train_dsm(target.sample(5000, rng), sch, net, 5000, 2e-3, rng)
    learned, exact = NetworkField(net, sch), MixtureField(target, sch)
    g = np.linspace(-3, 3, 20)
    X, Y = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], 1)
    mse = float(np.mean([np.mean(np.sum((learned.score(pts, f * sch.T) - exact.score(pts, f * sch.T)) ** 2, axis=1)) for f in (0.1, 0.5, 0.9)]))
    h = np.asarray(net.loss_history)
    first, last = h[:100].mean(), h[-100:].mean()
    report(8, mse < 0.05 and last < first, f"grid MSE {mse:.4f} (tol 0.05); loss window-100 average {first:.3f} -> {last:.3f}")


def _tiny_config(seed):
    return parse_config(
        {
            "name": "det",
            "n_particles": 50,
            "methods": ["sds", "sdi", "pfd"],
            "snapshot_iterations": [0, 3, 6],
            "schedule": {"kind": "ve", "sigma_max": 3.0},
            "target": {"kind": "rings", "radii": [1.0, 2.0], "thickness": 0.15, "modes_per_ring": 16},
            "distillation": {"iterations": 6, "dsm_warmup": 20, "dsm_steps": 2, "hidden": 8},
            "metrics": {"kl_resolution": 32, "reference_samples": 200, "sw_projections": 16},
        },
        seed=seed,
    )


def test_criterion_9_reduction_chain_and_determinism(tmp_path):
    rng = np.random.default_rng(9)
    p, q = MixtureField(MIX3, VP), MixtureField(MIX3.broadened(2.0), VP)
    x0 = rng.normal(size=(200, 2))
    t = rng.uniform(0.02, 1.0, 200)
    fwd = SolverConfig.proportional(10)
    one = SolverConfig.fixed(1, method=EULER, parameterization=SIGMA)
    gap = float(np.max(np.abs(pfd_gradient(VP, p, q, x0, t, fwd, one).delta - sdi_gradient(VP, p, q, x0, t, fwd).delta)))

    identical = True
    prior = Prior(MixtureField(MIX3, VE))
    x = rng.normal(size=(40, 2))
    for method in (SDS, SDI, PFD):
        cfg = DistillationConfig(method=method, iterations=8, dsm_warmup=20, dsm_steps=3, hidden=8)
        a = run_distillation(ParticleEnsemble.seeded(x, 4), VE, prior, cfg).positions
        b = run_distillation(ParticleEnsemble.seeded(x, 4), VE, prior, cfg).positions
        identical &= a.tobytes() == b.tobytes()
    ma = run_experiment(_tiny_config(5), tmp_path / "a")
    mb = run_experiment(_tiny_config(5), tmp_path / "b")
    csvs = [f for f in ma.files() if f.endswith(".csv")]
    identical &= all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in csvs)
    identical &= ma.file_hashes == RunManifest.read(tmp_path / "b" / "manifest.json").file_hashes == mb.file_hashes
    report(9, gap <= 1e-12 and identical, f"PFD(1 Euler step) vs SDI max gap {gap:.1e} (tol 1e-12); byte-identical reruns: {identical} ({len(csvs)} CSVs)")


def test_criterion_10_kl_descent_footprint(fig3_run):
    cfg, manifest, rows, coverage, elapsed = fig3_run
    kl = [r["kl"] for r in rows if r["method"] == "pfd"]
    rises = [b / a - 1.0 for a, b in zip(kl, kl[1:])]
    ok = max(rises) <= 0.05 and kl[-1] < 0.25 * kl[0]
    report(10, ok, f"PFD grid_kl at tau {cfg.snapshot_iterations}: {[round(v, 3) for v in kl]}; largest rise {100 * max(rises):+.1f}% (tol 5%); final/initial {kl[-1] / kl[0]:.3f} (tol 0.25)")
