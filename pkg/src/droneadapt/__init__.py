"""Drone-noise speech enhancement with frequency-domain bottleneck adapters."""
from .dsp import SAMPLE_RATE, StftConfig, istft, stft
from .errors import (
    ConfigMismatchError,
    FormatError,
    LengthError,
    NonFiniteLossError,
    StateError,
    ValidationError,
)
from .masking import apply_mask, clamp_mask, compute_cirm
from .model import MaskNet, ModelConfig, build_model, insert_adapters, model_forward, param_count

__all__ = [
    "SAMPLE_RATE",
    "StftConfig",
    "stft",
    "istft",
    "compute_cirm",
    "apply_mask",
    "clamp_mask",
    "MaskNet",
    "ModelConfig",
    "build_model",
    "insert_adapters",
    "model_forward",
    "param_count",
    "ValidationError",
    "LengthError",
    "FormatError",
    "ConfigMismatchError",
    "StateError",
    "NonFiniteLossError",
]
