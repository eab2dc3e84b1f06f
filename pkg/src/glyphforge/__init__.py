"""Emergent glyphs: a generator and a classifier learn to communicate symbol
indices through rendered brushstrokes."""

from .checkpoint import load_checkpoint, save_checkpoint
from .evaluator import detect_redundancy, measure_accuracy, n_sweep, temperature_sweep
from .trainer import Checkpoint, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "TrainConfig", "train", "save_checkpoint", "load_checkpoint",
    "measure_accuracy", "n_sweep", "temperature_sweep", "detect_redundancy",
]
