"""Experiment harness: config files, metrics, checkpoints, figures, CLI."""

from .checkpoint import (
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, load_run_config, parse_config_text, render_config
from .metrics import MetricsError, aggregate_records, read_records
from .runner import run_ablation, run_eval, run_train, verify_checkpoint

__all__ = [
    "CheckpointError",
    "CheckpointIntegrityError",
    "CheckpointVersionError",
    "ConfigError",
    "MetricsError",
    "RunConfig",
    "aggregate_records",
    "load_checkpoint",
    "load_run_config",
    "parse_config_text",
    "read_records",
    "render_config",
    "run_ablation",
    "run_eval",
    "run_train",
    "save_checkpoint",
    "verify_checkpoint",
]
