import numpy as np
import pytest

from pfdlab.distillation import (
    PFD,
    PRIOR_SURROGATE,
    SDI,
    SDS,
    DistillationConfig,
    DistillationDiverged,
    ParticleEnsemble,
    Prior,
    anneal_t_max,
    cfg_sign_lint,
    gradient,
    pfd_gradient,
    run_distillation,
    sdi_gradient,
    sds_gradient,
)
from pfdlab.metrics import ring_coverage
from pfdlab.oracle import gaussian_flow
from pfdlab.schedules import NoiseSchedule, perturb
from pfdlab.score_fields import GaussianMixture, MixtureField, NetworkField, RingSpec, ScoreField, ScoreNetwork, gaussian_field, ring_to_mixture
from pfdlab.solvers import EULER, SIGMA, SolverConfig, posterior_mean

VE = NoiseSchedule.ve(1.0)
VP = NoiseSchedule.vp(0.1, 20.0)
FINE = SolverConfig.fixed(1000)
FINE_SIGMA = SolverConfig.fixed(1000, parameterization=SIGMA)


class Blowup(ScoreField):
    dim = 2

    def _score_rows(self, x, t):
        return np.full_like(x, np.nan)


def test_sds_examples():
    p = gaussian_field([0.0, 0.0], 0.1, VE)
    g = sds_gradient(VE, p, [1.0, 0.0], 1.0, [0.0, 0.0])
    np.testing.assert_allclose(g.x0_hat, [0.01 / 1.01, 0.0], rtol=1e-12)
    np.testing.assert_allclose(g.delta, [1 - 0.01 / 1.01, 0.0], rtol=1e-12)
    np.testing.assert_array_equal(g.delta, np.array([1.0, 0.0]) - g.x0_hat)


def test_sds_vanishes_when_prediction_matches_noise():
    mu, s = np.array([0.5, -0.5]), 0.6
    p = gaussian_field(mu, s, VE)
    x0, t = np.array([1.0, 0.2]), 0.4
    sig = VE.sigma(t)
    noise = sig * (x0 - mu) / s**2  # eps_pred(x0 + sig * noise) == noise
    g = sds_gradient(VE, p, x0, t, noise)
    np.testing.assert_allclose(g.delta, 0.0, atol=1e-12)


@pytest.mark.parametrize("sch", [VE, VP])
def test_sds_eps_form(sch):
    rng = np.random.default_rng(0)
    p = MixtureField(GaussianMixture.isotropic([0.5, 0.5], [[-1.0, 0.0], [1.0, 1.0]], [0.4, 0.7]), sch)
    x0 = rng.normal(size=(100, 2))
    t = rng.uniform(0.02, 0.98, 100)
    g = sds_gradient(sch, p, x0, t, rng.normal(size=(100, 2)))
    # sigma (eps_pred - eps) is the residual measured in scaled coordinates
    np.testing.assert_allclose(g.eps_form, g.delta, rtol=1e-10, atol=1e-12)


def test_reduction_chain():
    rng = np.random.default_rng(1)
    mix = GaussianMixture.isotropic([0.3, 0.7], [[-1.0, 0.5], [1.5, -1.0]], [0.5, 0.8])
    p, q = MixtureField(mix, VP), MixtureField(mix.broadened(2.0), VP)
    x0 = rng.normal(size=(100, 2))
    t = rng.uniform(0.02, 0.98, 100)
    one = SolverConfig.fixed(1, method=EULER, parameterization=SIGMA)
    fwd = SolverConfig.proportional(10)
    sdi = sdi_gradient(VP, p, q, x0, t, fwd)
    pfd = pfd_gradient(VP, p, q, x0, t, fwd, one)
    np.testing.assert_allclose(pfd.delta, sdi.delta, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(pfd.x_t, sdi.x_t)
    # SDI with the inversion replaced by the stochastic perturbation is SDS
    noise = rng.normal(size=(100, 2))
    x_t = perturb(VP, x0, t, noise)
    swapped = x0 - posterior_mean(VP, p, x_t, t)
    np.testing.assert_allclose(sds_gradient(VP, p, x0, t, noise).delta, swapped, rtol=1e-12, atol=1e-12)


def test_sdi_gaussian_closed_form():
    mq, mp = np.array([1.0, -0.5]), np.array([0.0, 0.5])
    q, p = gaussian_field(mq, 1.0, VE), gaussian_field(mp, 1.0, VE)
    x0, t = np.array([0.3, 0.8]), 0.6
    x_t = gaussian_flow(VE, mq, 1.0, 0.0, t)(x0)
    sig2 = t * t
    expected = x0 - (x_t + sig2 * mp) / (1 + sig2)
    g = sdi_gradient(VE, p, q, x0, t, FINE)
    np.testing.assert_allclose(g.delta, expected, atol=1e-5)


def test_sdi_matched_fields_shrinks_with_t():
    mix = GaussianMixture.isotropic([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.5]], [0.5, 0.5])
    f = MixtureField(mix, VE)
    x0 = mix.sample(200, np.random.default_rng(2))
    norms = [np.mean(np.linalg.norm(sdi_gradient(VE, f, f, x0, t, FINE).delta, axis=1)) for t in (0.8, 0.4, 0.1, 0.02)]
    assert all(a > b for a, b in zip(norms, norms[1:]))


def test_pfd_gaussian_closed_form():
    q, p = gaussian_field([1.0], 0.5, VE), gaussian_field([0.0], 1.0, VE)
    x0, t = np.array([1.2]), 0.5
    x_hat = gaussian_flow(VE, [1.0], 0.5, 0.0, t).then(gaussian_flow(VE, [0.0], 1.0, t, 0.0))(x0)
    g = pfd_gradient(VE, p, q, x0, t, FINE, FINE_SIGMA)
    np.testing.assert_allclose(g.delta, x0 - x_hat, atol=1e-5)


@pytest.mark.parametrize("sch", [VE, VP])
def test_pfd_matched_fields_roundtrip(sch):
    mix = GaussianMixture.isotropic([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.5]], [0.5, 0.5])
    f = MixtureField(mix, sch)
    rng = np.random.default_rng(3)
    x0 = mix.sample(50, rng)
    for t in (0.05, 0.3, 0.7, 1.0):
        g = pfd_gradient(sch, f, f, x0, t, SolverConfig.fixed(400), SolverConfig.fixed(400))
        assert np.max(np.linalg.norm(g.delta, axis=1)) < 1e-3


def test_pfd_time_average_matches_affine_flows():
    # per-draw agreement with the closed-form composition, so the Monte-Carlo averages agree too
    from pfdlab.oracle import theorem1_check

    q, p = gaussian_field([1.0], 0.5, VE), gaussian_field([0.0], 1.0, VE)
    rng = np.random.default_rng(4)
    t = rng.uniform(0.0, 1.0, 20_000)
    x0 = np.full((len(t), 1), 1.2)
    cfg = SolverConfig.fixed(200)
    g = pfd_gradient(VE, p, q, x0, t, cfg, cfg)
    flows = [gaussian_flow(VE, [1.0], 0.5, 0.0, s).then(gaussian_flow(VE, [0.0], 1.0, s, 0.0)) for s in t[:200]]
    exact = np.array([1.2 - f([1.2])[0] for f in flows])
    np.testing.assert_allclose(g.delta[:200, 0], exact, atol=1e-5)
    ref = theorem1_check(VE, (1.0, 0.5), (0.0, 1.0), 1.2)
    assert g.delta.mean() == pytest.approx(ref.lhs[0], abs=2e-3)
    assert g.delta.mean() == pytest.approx(ref.rhs_true_jacobian[0], abs=2e-3)


def test_gradient_dispatch():
    f = gaussian_field([0.0, 0.0], 1.0, VE)
    x0 = np.array([[0.5, 0.5]])
    for method in (SDS, SDI, PFD):
        cfg = DistillationConfig(method=method)
        g = gradient(cfg, VE, f, f, x0, np.array([0.5]), np.zeros((1, 2)))
        assert g.delta.shape == (1, 2)


def test_config_validation():
    with pytest.raises(ValueError):
        DistillationConfig(method="vsd")
    with pytest.raises(ValueError):
        DistillationConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        DistillationConfig(q_score_mode="other")
    with pytest.raises(ValueError):
        DistillationConfig(q_init="other")
    with pytest.raises(ValueError):
        DistillationConfig(anneal=(10, 0.99)).time_range(NoiseSchedule.ve(1.0, t_max=0.9))
    assert DistillationConfig(method="PFD").method == PFD


def test_anneal_examples():
    T = 1.0
    plain = DistillationConfig()
    assert anneal_t_max(plain, 0, 0.98 * T) == anneal_t_max(plain, 10**6, 0.98 * T) == 0.98 * T
    cfg = DistillationConfig(anneal=(7000, 0.70 * T))
    assert anneal_t_max(cfg, 6999, 0.98 * T) == 0.98 * T
    assert anneal_t_max(cfg, 7000, 0.98 * T) == 0.70 * T


def test_sign_lint():
    assert cfg_sign_lint(DistillationConfig(method=PFD, gamma_fwd=-6.5, gamma_rev=7.5)) == []
    assert len(cfg_sign_lint(DistillationConfig(method=SDI, gamma_fwd=7.5, gamma_rev=7.5))) == 1
    assert cfg_sign_lint(DistillationConfig(method=SDS, gamma_fwd=7.5)) == []
    f = gaussian_field([0.0, 0.0], 1.0, VE)
    ens = ParticleEnsemble.seeded(np.zeros((3, 2)), 0)
    cfg = DistillationConfig(method=SDI, gamma_fwd=7.5, gamma_rev=7.5, iterations=0, q_score_mode=PRIOR_SURROGATE)
    with pytest.warns(UserWarning, match="gamma_fwd"):
        run_distillation(ens, VE, f, cfg)


def test_zero_iterations_is_identity():
    x = np.random.default_rng(5).normal(size=(10, 2))
    ens = ParticleEnsemble.seeded(x, 1)
    out = run_distillation(ens, VE, gaussian_field([0, 0], 1.0, VE), DistillationConfig(method=SDS, iterations=0))
    np.testing.assert_array_equal(out.positions, x)
    assert out.iteration == 0


def test_ensemble_validation():
    with pytest.raises(ValueError):
        ParticleEnsemble(np.empty((0, 2)))
    with pytest.raises(ValueError):
        ParticleEnsemble([[np.nan, 0.0]])


def _small_run(method, seed, **kw):
    mix = GaussianMixture.isotropic([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.5]], [0.4, 0.4])
    prior = Prior(MixtureField(mix, VE), MixtureField(mix.broadened(4.0), VE))
    x = np.random.default_rng(0).normal(size=(40, 2)) * 2
    cfg = DistillationConfig(method=method, iterations=15, dsm_warmup=30, dsm_steps=5, hidden=16, snapshot_iterations=(0, 5, 15), **kw)
    snaps = []
    out = run_distillation(ParticleEnsemble.seeded(x, seed), VE, prior, cfg, lambda tau, pos: snaps.append((tau, pos)))
    return out, snaps


@pytest.mark.parametrize("method", [SDS, SDI, PFD])
def test_determinism(method):
    a, sa = _small_run(method, 7)
    b, sb = _small_run(method, 7)
    assert a.positions.tobytes() == b.positions.tobytes()
    assert [t for t, _ in sa] == [0, 5, 15]
    for (_, pa), (_, pb) in zip(sa, sb):
        assert pa.tobytes() == pb.tobytes()
    c, _ = _small_run(method, 8)
    assert c.positions.tobytes() != a.positions.tobytes()


def test_prior_surrogate_mode_runs():
    out, _ = _small_run(PFD, 3, q_score_mode=PRIOR_SURROGATE, gamma_fwd=-6.5, gamma_rev=7.5)
    assert out.iteration == 15
    assert np.all(np.isfinite(out.positions))


def test_q_init_from_prior_copies_network():
    rng = np.random.default_rng(0)
    net = ScoreNetwork.default(2, 8, 2, rng=rng)
    prior = Prior(NetworkField(net, VE))
    before = [p.copy() for p in net.params]
    cfg = DistillationConfig(method=PFD, iterations=2, dsm_warmup=3, dsm_steps=1, q_init="prior")
    run_distillation(ParticleEnsemble.seeded(rng.normal(size=(5, 2)), 0), VE, prior, cfg)
    for a, b in zip(before, net.params):
        np.testing.assert_array_equal(a, b)  # the prior network itself is untouched
    with pytest.raises(ValueError, match="network"):
        run_distillation(ParticleEnsemble.seeded(np.zeros((2, 2)), 0), VE, gaussian_field([0, 0], 1.0, VE), cfg)


def test_fixed_point_with_analytic_q():
    mix = GaussianMixture.isotropic([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.5]], [0.5, 0.5])
    f = MixtureField(mix, VE)
    x = mix.sample(100, np.random.default_rng(6))
    cfg = DistillationConfig(
        method=PFD,
        iterations=20,
        forward_solver=SolverConfig.fixed(200),
        reverse_solver=SolverConfig.fixed(200),
    )
    out = run_distillation(ParticleEnsemble.seeded(x, 2), VE, f, cfg, q_field=f)
    # 20 updates of size lr * |Delta| with |Delta| at roundtrip-error level
    assert np.max(np.linalg.norm(out.positions - x, axis=1)) < 20 * cfg.learning_rate * 1e-3


def test_divergence_dumps_state():
    f = gaussian_field([0.0, 0.0], 1.0, VE)
    cfg = DistillationConfig(method=PFD, iterations=3)
    with pytest.raises(DistillationDiverged) as info:
        run_distillation(ParticleEnsemble.seeded(np.ones((4, 2)), 0), VE, f, cfg, q_field=Blowup())
    assert info.value.iteration == 0
    assert info.value.positions.shape == (4, 2)


def test_sds_collapses_on_two_rings():
    spec = RingSpec(radii=(1.0, 2.0), thickness=0.1, modes_per_ring=64)
    sch = NoiseSchedule.ve(4.0)
    prior = MixtureField(ring_to_mixture(spec), sch)
    x = np.random.default_rng(0).normal(size=(1000, 2)) * 3
    cfg = DistillationConfig(method=SDS, iterations=2000, learning_rate=0.1)
    out = run_distillation(ParticleEnsemble.seeded(x, 0), sch, prior, cfg)
    rep = ring_coverage(out.positions, spec, 0.3)
    assert rep.occupancy < 0.5
    assert rep.collapsed
