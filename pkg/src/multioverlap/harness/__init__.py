"""Experiment orchestration: configs, sweeps, oracle gate, reports and the CLI."""
from .config import ConfigError, ExperimentConfig, load_config
from .runner import DiagnosticFailure, oracle_gate, run_experiment

__all__ = ["ConfigError", "DiagnosticFailure", "ExperimentConfig", "load_config", "oracle_gate",
           "run_experiment"]
