"""Safe MPC-guided reinforcement learning for gust load alleviation.

Modules
-------
plant
    Two-degree-of-freedom wing section with a flap actuator.
gust
    Bounded Dryden turbulence.
lpv
    State-scheduled linearisation and its validation.
mpc
    Move-blocked MPC and certified safe input bounds.
qlearn
    Tabular Q-learning inside the certified bounds.
safety_filter
    Lipschitz safety filter over verified transitions.
harness
    Closed-loop episodes, baselines and Monte Carlo campaigns.
config, pipeline, cli
    Run configuration, artifact pipeline and command-line entry point.
"""

from .envelope import Envelope
from .exceptions import ConfigurationError, DomainError, InfeasibleError, NotFittedError, ScheduleError
from .gust import GustConfig, dryden_generate
from .lpv import LpvModel, linearize_model
from .mpc import MpcConfig, SafeBounds, safe_bounds, solve_mpc
from .plant import PlantParams, default_params, simulate, step_euler, step_taylor2
from .qlearn import QLearningPolicy, QTable, RewardConfig, StateGrid
from .safety_filter import SafetyFilter, TransitionDb

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DomainError",
    "Envelope",
    "GustConfig",
    "InfeasibleError",
    "LpvModel",
    "MpcConfig",
    "NotFittedError",
    "PlantParams",
    "QLearningPolicy",
    "QTable",
    "RewardConfig",
    "SafeBounds",
    "SafetyFilter",
    "ScheduleError",
    "StateGrid",
    "TransitionDb",
    "default_params",
    "dryden_generate",
    "linearize_model",
    "safe_bounds",
    "simulate",
    "solve_mpc",
    "step_euler",
    "step_taylor2",
]
