"""Rehearsal-free federated domain-incremental learning with global prompt sharing."""

from .config import ExperimentConfig, load_config
from .federation import run_federated
from .metrics import avg_accuracy, backward_transfer, forgetting, last_accuracy
from .runner import emit_report, run_experiment

__all__ = [
    "ExperimentConfig",
    "load_config",
    "run_federated",
    "run_experiment",
    "emit_report",
    "avg_accuracy",
    "last_accuracy",
    "forgetting",
    "backward_transfer",
]
