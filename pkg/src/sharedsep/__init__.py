"""Shared-encoder, multi-decoder magnitude-spectrogram source separation."""
from .dsp import StftConfig, fit_normalization, istft, stft
from .model import SOURCES, SharedModel, build_independent_networks, build_shared_model, param_count
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "SOURCES",
    "SharedModel",
    "StftConfig",
    "TrainConfig",
    "build_independent_networks",
    "build_shared_model",
    "fit_normalization",
    "istft",
    "param_count",
    "stft",
    "train",
]
