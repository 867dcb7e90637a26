"""Desk-scale simulator of uncertainty-minimizing personalized federated
semi-supervised learning: helpers are chosen by a data-relation score,
unlabeled points take the least-uncertain helper prediction as a soft
pseudo label, and every model exchange is charged to a cost ledger."""

from .config import ExperimentConfig, config_from_dict, parse_config
from .experiment import run_experiment, setup
from .ledger import CostLedger, cost1, cost2_bound, savings_delta
from .protocol import RoundConfig, Trace, run, run_baseline

__all__ = [
    "CostLedger",
    "ExperimentConfig",
    "RoundConfig",
    "Trace",
    "config_from_dict",
    "cost1",
    "cost2_bound",
    "parse_config",
    "run",
    "run_baseline",
    "run_experiment",
    "savings_delta",
    "setup",
]

__version__ = "0.1.0"
