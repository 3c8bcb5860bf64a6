"""Experiment harness: configuration, checkpoints, pipeline runs and figures."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ABLATIONS, BASELINES, VARIANTS, ConfigError, DataConfig, RunConfig, load_config
from .pipeline import (ablation_matrix, export_features, run_baseline_decoupling, run_pipeline,
                       run_seed)

__all__ = [
    "ABLATIONS", "BASELINES", "VARIANTS", "CheckpointError", "ConfigError", "DataConfig",
    "RunConfig", "ablation_matrix", "export_features", "load_checkpoint", "load_config",
    "run_baseline_decoupling", "run_pipeline", "run_seed", "save_checkpoint",
]
