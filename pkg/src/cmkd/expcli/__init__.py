"""Declarative experiment runner, report emitter and CLI."""
from .config import ConfigError, ExperimentConfig, config_hash, load_config, parse_config
from .report import ReportError, emit_report
from .runner import Experiment, MissingArtifact, run_experiment

__all__ = ["ConfigError", "Experiment", "ExperimentConfig", "MissingArtifact", "ReportError",
           "config_hash", "emit_report", "load_config", "parse_config", "run_experiment"]
