"""Learning when to retrain a deployed classifier under concept drift.

Modules:
    drift_env   synthetic drifting data and seeded random streams
    classifier  IRLS logistic regression and batch metrics
    mdp         the maintenance decision process and its simulator
    neural      numpy MLPs with exact gradients and Adam
    ppo         PPO training (static) and online fine-tuning (dynamic)
    baselines   drift detectors and fixed update schedules
    harness     scenarios, comparisons, rho tuning and result files
    cli         command-line entry point
"""

from .drift_env import ConfigError, DgpParams, DriftConfig, derive_rng
from .harness import ExperimentConfig, ResultTable, run_comparison, tune_rho
from .ppo import Agent, PpoConfig, train_static

__all__ = [
    "Agent",
    "ConfigError",
    "DgpParams",
    "DriftConfig",
    "ExperimentConfig",
    "PpoConfig",
    "ResultTable",
    "derive_rng",
    "run_comparison",
    "train_static",
    "tune_rho",
]

__version__ = "0.1.0"
