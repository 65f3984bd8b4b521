"""Conv-cut: a truncated ConvNeXt with a Detail Extraction block for facial
expression recognition, on a small numpy autodiff engine."""

from .errors import (
    ConfigError,
    ContractError,
    ConvCutError,
    DataError,
    DimensionError,
    LayerLookupError,
    LoadError,
    NumericalError,
)
from .model import ConvCutConfig, ConvCutModel, build_model, grad_cam, profile_config
from .tensor import GradTape, Parameter, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "ConvCutError",
    "DataError",
    "DimensionError",
    "LayerLookupError",
    "LoadError",
    "NumericalError",
    "ConvCutConfig",
    "ConvCutModel",
    "build_model",
    "grad_cam",
    "profile_config",
    "GradTape",
    "Parameter",
    "Tensor",
    "backward",
    "no_grad",
]
