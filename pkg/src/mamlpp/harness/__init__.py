"""Experiment orchestration: configs, training runs, checkpoints, metrics, CLI."""

from .checkpoint import Checkpoint, DigestMismatchWarning, load_checkpoint, save_checkpoint
from .config import PRESETS, DatasetConfig, ExperimentConfig, NetworkConfig, RunConfig, load_config, preset
from .evaluation import EvalResult, evaluate, select_top3, test_with_ensemble
from .metrics import (
    MetricsRecord,
    MetricsWriter,
    SeedResult,
    read_metrics,
    timing_by_order,
    write_summary,
)
from .training import DataBundle, RunArtifacts, Trainer, build_data, make_learner, run_training

__all__ = [
    "PRESETS", "Checkpoint", "DataBundle", "DatasetConfig", "DigestMismatchWarning", "EvalResult",
    "ExperimentConfig", "MetricsRecord", "MetricsWriter", "NetworkConfig", "RunArtifacts",
    "RunConfig", "SeedResult", "Trainer", "build_data", "evaluate", "load_checkpoint",
    "load_config", "make_learner", "preset", "read_metrics", "run_training", "save_checkpoint", "select_top3",
    "test_with_ensemble", "timing_by_order", "write_summary",
]
