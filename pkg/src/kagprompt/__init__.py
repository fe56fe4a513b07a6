"""Kernel-aware graph prompts for few-shot anomaly detection, in numpy."""
from .config import RunConfig, parse_config
from .graph import KahgParams, init_params, run_kahg
from .scoring import MemoryBank, TextFeatures
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "parse_config",
    "KahgParams",
    "init_params",
    "run_kahg",
    "MemoryBank",
    "TextFeatures",
    "Tape",
    "Tensor",
    "backward",
]
