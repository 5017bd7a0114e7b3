"""Content-disentangled superpixels: training, inference, baselines, metrics."""

from . import autodiff, imageio, losses, metrics, modality, model, slic, superpixels, training

__all__ = [
    "autodiff",
    "imageio",
    "losses",
    "metrics",
    "modality",
    "model",
    "slic",
    "superpixels",
    "training",
]

__version__ = "0.1.0"
