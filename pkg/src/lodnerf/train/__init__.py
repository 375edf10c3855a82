"""Training: pyramid supervision, composite loss, and the fitting loop."""

from .pyramid import PyramidDataset, build_pyramid, sample_pixels
from .losses import (rgb_loss, distortion_loss, transparency_loss,
                     level_consistency_loss)
from .loop import TrainConfig, train_step, fit, compute_batch
from .optim import AdamOptimizer

__all__ = [
    "PyramidDataset", "build_pyramid", "sample_pixels",
    "rgb_loss", "distortion_loss", "transparency_loss", "level_consistency_loss",
    "TrainConfig", "train_step", "fit", "compute_batch", "AdamOptimizer",
]
