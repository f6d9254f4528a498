"""Three-stream (video, image, text) fusion with a from-scratch autodiff engine."""

from .data import SynthConfig, generate_synthetic, load_dataset, read_manifest, synthetic_dataset
from .metrics import FoldReport, aggregate_folds, ccc, f1_binary
from .model import MODES, init_model, model_forward, predict
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "MODES",
    "FoldReport",
    "SynthConfig",
    "TrainConfig",
    "aggregate_folds",
    "ccc",
    "evaluate",
    "f1_binary",
    "generate_synthetic",
    "init_model",
    "load_checkpoint",
    "load_dataset",
    "model_forward",
    "predict",
    "read_manifest",
    "save_checkpoint",
    "synthetic_dataset",
    "train",
]
