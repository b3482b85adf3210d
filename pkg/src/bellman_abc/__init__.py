"""Posterior sampling of optimal action values under relaxed Bellman constraints."""

from .agent import learning_time, run_online
from .config import ConfigError, RunConfig, load_config
from .estimators import OfflineHMCPosterior, SMCQPosterior
from .mdp import Dataset, QIndex, TabularMdp, Transition, deep_sea, five_state_example, make_env, two_state_example
from .model import UNCONSTRAINED, BellmanModel, Posterior, PriorSpec, ToleranceAssignment
from .oracle import event_probability, five_state_choice_probability
from .smc import ParticleSet, SmcConfig, SmcEngine

__version__ = "0.1.0"

__all__ = [
    "BellmanModel",
    "ConfigError",
    "Dataset",
    "OfflineHMCPosterior",
    "ParticleSet",
    "Posterior",
    "PriorSpec",
    "QIndex",
    "RunConfig",
    "SMCQPosterior",
    "SmcConfig",
    "SmcEngine",
    "TabularMdp",
    "ToleranceAssignment",
    "Transition",
    "UNCONSTRAINED",
    "deep_sea",
    "event_probability",
    "five_state_choice_probability",
    "five_state_example",
    "learning_time",
    "load_config",
    "make_env",
    "run_online",
    "two_state_example",
]
