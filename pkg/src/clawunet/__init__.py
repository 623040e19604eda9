"""Claw UNet vessel segmentation: model, metrics, synthetic data and training harness."""
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Sample, SynthSpec, load_dataset, split, synth_generate
from .metrics import MetricsReport, evaluate_set
from .model import ClawUNet, ModelConfig, init_params, predict_mask
from .training import TrainConfig, ablate, evaluate, overfit_sanity, train

__all__ = [
    "ClawUNet", "ModelConfig", "init_params", "predict_mask",
    "Sample", "SynthSpec", "load_dataset", "split", "synth_generate",
    "MetricsReport", "evaluate_set",
    "TrainConfig", "train", "evaluate", "ablate", "overfit_sanity",
    "load_checkpoint", "save_checkpoint",
]
__version__ = "0.1.0"
