"""Rotation-invariant transformer re-identification, desk scale."""

from .config import (BackboneConfig, LossConfig, RotationConfig, SynthConfig,
                     TrainConfig, load_config)
from .model import RotReidModel
from .tensor import Tensor

__all__ = [
    "BackboneConfig", "LossConfig", "RotationConfig", "SynthConfig",
    "TrainConfig", "load_config", "RotReidModel", "Tensor",
]
__version__ = "0.1.0"
