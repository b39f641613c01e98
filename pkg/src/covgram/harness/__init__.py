"""Experiment orchestration: configs, training, metrics, sweeps, CLI."""

from .config import ConfigError, ExperimentConfig, load_config
from .metrics import EmptyEvaluationError, evaluate_metrics
from .training import DivergenceError, RunResult, train
from .sweeps import measure_covterm_cost, sweep
from .cnp_compare import run_cnp_comparison

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "EmptyEvaluationError",
    "evaluate_metrics",
    "DivergenceError",
    "RunResult",
    "train",
    "sweep",
    "measure_covterm_cost",
    "run_cnp_comparison",
]
