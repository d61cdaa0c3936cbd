"""Deep conditional transformation models for probabilistic regression."""

from .kernels import BACKEND
from .flow import (
    DeepTransformationModel,
    LinearTransformationModel,
    ModelConfig,
    TransformParams,
    load_model,
)

__all__ = [
    "BACKEND",
    "DeepTransformationModel",
    "LinearTransformationModel",
    "ModelConfig",
    "TransformParams",
    "load_model",
]
__version__ = "0.1.0"
