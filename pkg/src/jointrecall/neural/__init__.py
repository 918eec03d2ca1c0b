"""Desk-scale hybrid SSM + sparse attention models and their training."""

from .model import HybridModel, HybridModelConfig
from .train import TrainConfig, TrainResult, evaluate, load_checkpoint, model_config_for, save_checkpoint, train

__all__ = [
    "HybridModel",
    "HybridModelConfig",
    "TrainConfig",
    "TrainResult",
    "evaluate",
    "load_checkpoint",
    "model_config_for",
    "save_checkpoint",
    "train",
]
