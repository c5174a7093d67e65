"""Score fields: analytic mixtures, learned networks, and guided combinations."""

from .base import (
    NonFiniteInputError,
    ScoreField,
    SingularScalingError,
    eps_from_score,
    score_from_eps,
)
from .guidance import CfgField, cfg_combine, combine
from .mixture import (
    GaussianMixture,
    MixtureField,
    RingSpec,
    gaussian_field,
    mixture_score,
    noised_mixture,
    ring_to_mixture,
)
from .network import NetworkField, ScoreNetwork, TrainingDiverged, dsm_loss_and_grad, train_dsm

__all__ = [
    "CfgField",
    "GaussianMixture",
    "MixtureField",
    "NetworkField",
    "NonFiniteInputError",
    "RingSpec",
    "ScoreField",
    "ScoreNetwork",
    "SingularScalingError",
    "TrainingDiverged",
    "cfg_combine",
    "combine",
    "dsm_loss_and_grad",
    "eps_from_score",
    "gaussian_field",
    "mixture_score",
    "noised_mixture",
    "ring_to_mixture",
    "score_from_eps",
    "train_dsm",
]
