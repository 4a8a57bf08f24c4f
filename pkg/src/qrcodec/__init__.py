"""Learned image codec with a decoder-side quantization rectifier."""

from .codec import PROFILES, CodecModel, load_checkpoint, save_checkpoint
from .training import (ExplorationConfig, TrainingConfig, explore_alpha,
                       train_predictive_phase, train_soft_phase)

__version__ = "0.1.0"

__all__ = [
    "PROFILES", "CodecModel", "load_checkpoint", "save_checkpoint",
    "ExplorationConfig", "TrainingConfig", "explore_alpha",
    "train_predictive_phase", "train_soft_phase", "__version__",
]
