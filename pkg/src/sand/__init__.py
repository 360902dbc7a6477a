"""Masked self-attention with dense interpolation for multivariate time series."""

from __future__ import annotations

__version__ = "0.1.0"

from .config import ModelConfig, RunConfig, TrainConfig
from .data import SequenceBatch, generate, load_ndjson, save_ndjson, split
from .heads import MultiTaskWeights
from .metrics import MetricsReport
from .model import SandModel
from .train import evaluate, predict, train

__all__ = [
    "ModelConfig",
    "MetricsReport",
    "MultiTaskWeights",
    "RunConfig",
    "SandModel",
    "SequenceBatch",
    "TrainConfig",
    "evaluate",
    "generate",
    "load_ndjson",
    "predict",
    "save_ndjson",
    "split",
    "train",
]
