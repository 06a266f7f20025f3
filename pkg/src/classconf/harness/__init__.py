"""Experiment harness: config files, benchmark driver and command line."""

from .config import ExperimentConfig
from .runner import (emit_plot_data, load_data, run_ablation, run_benchmark, run_eval,
                     run_training)

__all__ = ["ExperimentConfig", "emit_plot_data", "load_data", "run_ablation",
           "run_benchmark", "run_eval", "run_training"]
