"""SDS, SDI and PFD gradient estimators and the particle optimization loop.

All three estimators return the residual ``Delta_t = x0 - x0_hat``; they
differ only in how x0 reaches the noisy state and how it comes back:

=====  ==========================  ===========================
       x0 -> x_t                   x_t -> x0_hat
=====  ==========================  ===========================
SDS    random perturbation         one-step posterior mean
SDI    q-flow PF-ODE (inversion)   one-step posterior mean
PFD    q-flow PF-ODE (inversion)   reverse p-flow PF-ODE
=====  ==========================  ===========================
"""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .schedules import NoiseSchedule, _col, perturb
from .score_fields import CfgField, NetworkField, ScoreField, ScoreNetwork, train_dsm
from .score_fields.base import as_rows, row_times
from .solvers import EULER, HEUN, NATIVE, SIGMA, DivergenceError, SolverConfig, flow, posterior_mean

log = logging.getLogger(__name__)

SDS, SDI, PFD = "sds", "sdi", "pfd"
METHODS = (SDS, SDI, PFD)
LEARNED, PRIOR_SURROGATE = "learned", "prior_surrogate"
FRESH, FROM_PRIOR = "fresh", "prior"


class DistillationDiverged(RuntimeError):
    def __init__(self, iteration: int, positions: np.ndarray, cause: Optional[BaseException] = None):
        self.iteration = iteration
        self.positions = positions
        bad = np.nonzero(~np.all(np.isfinite(positions), axis=1))[0]
        super().__init__(f"particles {bad[:10].tolist()} diverged at iteration {iteration}" + (f": {cause}" if cause else ""))


@dataclass
class ParticleEnsemble:
    positions: np.ndarray
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if len(self.positions) < 1:
            raise ValueError("ensemble needs at least one particle")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("ensemble positions must be finite")

    @classmethod
    def seeded(cls, positions, seed: int) -> "ParticleEnsemble":
        return cls(positions, 0, np.random.default_rng(seed))

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.positions.copy(), self.iteration, copy.deepcopy(self.rng))


@dataclass
class GradientSample:
    index: np.ndarray
    t: np.ndarray
    delta: np.ndarray
    x_t: np.ndarray
    x0_hat: np.ndarray
    eps_form: Optional[np.ndarray] = None  # SDS only: sigma_t (eps_pred - eps)


@dataclass
class Prior:
    """Target prior as a conditional field plus an optional unconditional one for guidance."""

    conditional: ScoreField
    unconditional: Optional[ScoreField] = None

    def guided(self, gamma: float) -> ScoreField:
        if self.unconditional is None or gamma == 1.0:
            return self.conditional
        return CfgField(self.conditional, self.unconditional, gamma)


@dataclass
class DistillationConfig:
    method: str = PFD
    learning_rate: float = 0.1
    iterations: int = 1000
    gamma_fwd: float = -6.5
    gamma_rev: float = 7.5
    q_score_mode: str = LEARNED
    anneal: Optional[Tuple[int, float]] = None  # (switch iteration, new t_max)
    forward_solver: SolverConfig = field(default_factory=lambda: SolverConfig.proportional(10, HEUN, NATIVE))
    reverse_solver: SolverConfig = field(default_factory=lambda: SolverConfig.proportional(10, HEUN, SIGMA))
    t_min: Optional[float] = None
    t_max: Optional[float] = None
    batch_size: Optional[int] = None  # particles per iteration; None = full sweep
    snapshot_iterations: Sequence[int] = ()
    # learned q-score network
    dsm_steps: int = 20
    dsm_warmup: int = 500
    dsm_lr: float = 2e-3
    dsm_batch: int = 128
    hidden: int = 64
    depth: int = 2
    activation: str = "silu"
    q_init: str = FRESH  # "prior": start the q network from a copy of a learned prior network

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if int(self.iterations) < 0:
            raise ValueError("iterations must be >= 0")
        if self.q_score_mode not in (LEARNED, PRIOR_SURROGATE):
            raise ValueError(f"unknown q_score_mode {self.q_score_mode!r}")
        if self.q_init not in (FRESH, FROM_PRIOR):
            raise ValueError(f"unknown q_init {self.q_init!r}")
        if self.anneal is not None:
            self.anneal = (int(self.anneal[0]), float(self.anneal[1]))
        self.snapshot_iterations = tuple(sorted(int(s) for s in self.snapshot_iterations))

    def time_range(self, schedule: NoiseSchedule) -> Tuple[float, float]:
        lo = schedule.t_min if self.t_min is None else self.t_min
        hi = schedule.t_max if self.t_max is None else self.t_max
        if self.anneal is not None and self.anneal[1] > hi:
            raise ValueError("annealed t_max must not exceed the original t_max")
        return lo, hi


def anneal_t_max(config: DistillationConfig, tau: int, t_max: Optional[float] = None) -> float:
    """Upper end of the time-sampling range at iteration ``tau`` (step change at the switch)."""
    hi = config.t_max if t_max is None else t_max
    if config.anneal is not None and tau >= config.anneal[0]:
        return config.anneal[1]
    return hi


def cfg_sign_lint(config: DistillationConfig) -> List[str]:
    """Inversion-based methods expect a negative forward guidance scale."""
    issues = []
    if config.method in (SDI, PFD) and config.gamma_fwd > 0:
        issues.append(
            f"gamma_fwd={config.gamma_fwd} is positive for {config.method.upper()}; the forward "
            "inversion stands in for the particle score and normally uses gamma_fwd = 1 - gamma < 0"
        )
    return issues


# -- estimators ---------------------------------------------------------------


def sds_gradient(schedule: NoiseSchedule, prior_field: ScoreField, x0, t, noise) -> GradientSample:
    xb, single = as_rows(x0)
    tb = row_times(t, len(xb))
    nb = np.asarray(noise, dtype=float).reshape(xb.shape)
    x_t = perturb(schedule, xb, tb, nb)
    x_hat = posterior_mean(schedule, prior_field, x_t, tb)
    eps_pred = prior_field.eps(x_t, tb)
    eps_form = _col(schedule.sigma(tb)) * (eps_pred - nb)
    return _pack(np.arange(len(xb)), tb, xb - x_hat, x_t, x_hat, eps_form, single)


def sdi_gradient(
    schedule: NoiseSchedule,
    prior_field: ScoreField,
    q_field: ScoreField,
    x0,
    t,
    forward: SolverConfig = SolverConfig.proportional(10),
) -> GradientSample:
    xb, single = as_rows(x0)
    tb = row_times(t, len(xb))
    x_t = flow(schedule, q_field, xb, 0.0 * tb, tb, forward)
    x_hat = posterior_mean(schedule, prior_field, x_t, tb)
    return _pack(np.arange(len(xb)), tb, xb - x_hat, x_t, x_hat, None, single)


def pfd_gradient(
    schedule: NoiseSchedule,
    prior_field: ScoreField,
    q_field: ScoreField,
    x0,
    t,
    forward: SolverConfig = SolverConfig.proportional(10),
    reverse: SolverConfig = SolverConfig.proportional(10, parameterization=SIGMA),
) -> GradientSample:
    xb, single = as_rows(x0)
    tb = row_times(t, len(xb))
    x_t = flow(schedule, q_field, xb, 0.0 * tb, tb, forward)
    x_hat = flow(schedule, prior_field, x_t, tb, 0.0 * tb, reverse)
    return _pack(np.arange(len(xb)), tb, xb - x_hat, x_t, x_hat, None, single)


def _pack(index, t, delta, x_t, x_hat, eps_form, single):
    if single:
        return GradientSample(index[0], t[0], delta[0], x_t[0], x_hat[0], None if eps_form is None else eps_form[0])
    return GradientSample(index, t, delta, x_t, x_hat, eps_form)


def gradient(config: DistillationConfig, schedule, prior_field, q_field, x0, t, noise=None) -> GradientSample:
    if config.method == SDS:
        return sds_gradient(schedule, prior_field, x0, t, noise)
    if config.method == SDI:
        return sdi_gradient(schedule, prior_field, q_field, x0, t, config.forward_solver)
    return pfd_gradient(schedule, prior_field, q_field, x0, t, config.forward_solver, config.reverse_solver)


# -- optimization loop --------------------------------------------------------


def _data_scale(positions) -> float:
    return float(max(np.sqrt(np.mean(np.var(positions, axis=0))), 1e-3))


def run_distillation(
    ensemble: ParticleEnsemble,
    schedule: NoiseSchedule,
    prior: Union[Prior, ScoreField],
    config: DistillationConfig,
    snapshot_hook: Optional[Callable[[int, np.ndarray], None]] = None,
    q_field: Optional[ScoreField] = None,
    network: Optional[ScoreNetwork] = None,
) -> ParticleEnsemble:
    """Iterate Delta_t updates on the ensemble; returns a new ensemble.

    One iteration draws a block of particles in cyclic order (the whole
    ensemble by default), a time per particle, computes the configured
    estimator and commits ``x0 <- x0 - lr * Delta_t``.  ``q_field`` overrides
    the particle-score field (e.g. an analytic q); otherwise it is a learned
    network (warm-started, ``dsm_steps`` DSM updates per iteration) or the
    negatively guided prior, per ``q_score_mode``.  A network passed in (or
    copied from a learned prior with ``q_init='prior'``) is trained in place.
    """
    if not isinstance(prior, Prior):
        prior = Prior(prior)
    for msg in cfg_sign_lint(config):
        warnings.warn(msg, stacklevel=2)
    ens = ensemble.copy()
    rng = ens.rng
    pos = ens.positions
    N, d = pos.shape
    t_lo, t_hi = config.time_range(schedule)
    batch = N if config.batch_size is None else min(int(config.batch_size), N)
    prior_field = prior.guided(config.gamma_rev)

    net = None
    if config.method != SDS and q_field is None:
        if config.q_score_mode == PRIOR_SURROGATE:
            q_field = prior.guided(config.gamma_fwd)
        else:
            net = network
            if net is None and config.q_init == FROM_PRIOR:
                if not isinstance(prior.conditional, NetworkField):
                    raise ValueError("q_init='prior' needs a learned (network) prior")
                net = prior.conditional.net.copy()
                net._velocity = [np.zeros_like(p) for p in net.params]
                net.loss_history = []
            if net is None:
                net = ScoreNetwork.default(
                    d, config.hidden, config.depth, activation=config.activation, data_scale=_data_scale(pos), rng=rng
                )
            q_field = NetworkField(net, schedule)
            train_dsm(pos, schedule, net, config.dsm_warmup, config.dsm_lr, rng, batch_size=config.dsm_batch, t_range=(t_lo, t_hi))

    snaps = set(config.snapshot_iterations)
    start = ens.iteration
    stop = start + int(config.iterations)
    for tau in range(start, stop + 1):
        if snapshot_hook is not None and tau in snaps:
            snapshot_hook(tau, pos.copy())
        if tau == stop:
            break
        if net is not None and config.dsm_steps > 0:
            train_dsm(pos, schedule, net, config.dsm_steps, config.dsm_lr, rng, batch_size=config.dsm_batch, t_range=(t_lo, t_hi))
        idx = (tau * batch + np.arange(batch)) % N
        t = rng.uniform(t_lo, anneal_t_max(config, tau, t_hi), size=batch)
        noise = rng.standard_normal((batch, d)) if config.method == SDS else None
        try:
            g = gradient(config, schedule, prior_field, q_field, pos[idx], t, noise)
        except (DivergenceError, FloatingPointError) as exc:
            raise DistillationDiverged(tau, pos.copy(), exc) from exc
        pos[idx] -= config.learning_rate * g.delta
        if not np.all(np.isfinite(pos)):
            raise DistillationDiverged(tau, pos.copy())
        ens.iteration = tau + 1
    ens.positions = pos
    return ens
