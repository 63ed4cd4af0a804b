"""Exact KV-cache compression: keep keys, recompute values through ``W_KV``."""

from .linalg import OpCounter, SingularMatrixError, invert_square, right_inverse
from .model import (
    LayerWeights,
    ModelConfig,
    TransformedWeights,
    generate_synthetic_model,
    load_model,
    save_model,
)
from .rope import RopeTable
from .transform import transform_layer, transform_model, verify_value_reconstruction

__version__ = "0.1.0"

__all__ = [
    "LayerWeights",
    "ModelConfig",
    "OpCounter",
    "RopeTable",
    "SingularMatrixError",
    "TransformedWeights",
    "generate_synthetic_model",
    "invert_square",
    "load_model",
    "right_inverse",
    "save_model",
    "transform_layer",
    "transform_model",
    "verify_value_reconstruction",
]
