"""Safe offline reinforcement learning laboratory.

Learners follow the scikit-learn estimator convention (hyperparameters in
the constructor, fitted state in trailing-underscore attributes,
``fit``/``predict``/``get_params``); environments, dataset tooling and the
exact tabular verification engine are plain modules.
"""

from .baselines import NaiveDualActorCritic, SafeBehaviorCloning
from .config import ExperimentConfig
from .cpq import CPQ
from .data import (
    OfflineDataset,
    TransitionSample,
    batch_sample,
    empirical_behavior_policy,
    generate_dataset,
    load_dataset,
    save_dataset,
    scripted_policy,
)
from .envs import ChainEnv, CmdpTabularSpec, PointMassEnv, discounted_rollout, make_env
from .harness import EvalReport, evaluate_policy, run_experiment, sweep_limits
from .ood import BehaviorCVAE, calibrate_threshold, select_ood_actions

__version__ = "0.1.0"

__all__ = [
    "CPQ",
    "BehaviorCVAE",
    "SafeBehaviorCloning",
    "NaiveDualActorCritic",
    "ExperimentConfig",
    "OfflineDataset",
    "TransitionSample",
    "batch_sample",
    "empirical_behavior_policy",
    "generate_dataset",
    "load_dataset",
    "save_dataset",
    "scripted_policy",
    "ChainEnv",
    "PointMassEnv",
    "CmdpTabularSpec",
    "discounted_rollout",
    "make_env",
    "EvalReport",
    "evaluate_policy",
    "run_experiment",
    "sweep_limits",
    "calibrate_threshold",
    "select_ood_actions",
    "__version__",
]
