"""Deterministic federated-learning lab with fair bandit-style weight allocation."""

from .allocator import (
    AllocatorConfig,
    KlBallConstraint,
    WeightVector,
    dual_step,
    kernel_f,
    kl_to_uniform,
    project,
    solve_lambda,
    update_weights,
)
from .config import ExperimentConfig, dump_config, parse_config
from .engine import (
    ClientUpdate,
    ExperimentState,
    FedAvg,
    FedMaba,
    QFfl,
    RoundPlan,
    RoundRecord,
    init_experiment,
    run_round,
    run_rounds,
)
from .runner import emit_plot_data, run_experiment, run_verification

__all__ = [
    "AllocatorConfig",
    "KlBallConstraint",
    "WeightVector",
    "dual_step",
    "kernel_f",
    "kl_to_uniform",
    "project",
    "solve_lambda",
    "update_weights",
    "ExperimentConfig",
    "dump_config",
    "parse_config",
    "ClientUpdate",
    "ExperimentState",
    "FedAvg",
    "FedMaba",
    "QFfl",
    "RoundPlan",
    "RoundRecord",
    "init_experiment",
    "run_round",
    "run_rounds",
    "emit_plot_data",
    "run_experiment",
    "run_verification",
]

__version__ = "0.1.0"
