"""Separable self-attention, its MHA and Linformer baselines, a width-scaled
MobileViTv2 network, independent oracles, and a latency benchmark harness."""
from .attention import (
    KINDS,
    init_linformer,
    init_mha,
    init_separable,
    linformer_forward,
    mha_forward,
    separable_self_attention_forward,
)
from .errors import ConfigurationError, DimensionError, ShapeError, UsageError
from .mobilevitv2 import ModelSpec, build_model, count_macs, count_params, model_forward
from .tensor import make_rng

__version__ = "0.1.0"

__all__ = [
    "KINDS",
    "ConfigurationError",
    "DimensionError",
    "ModelSpec",
    "ShapeError",
    "UsageError",
    "build_model",
    "count_macs",
    "count_params",
    "init_linformer",
    "init_mha",
    "init_separable",
    "linformer_forward",
    "make_rng",
    "mha_forward",
    "model_forward",
    "separable_self_attention_forward",
]
