"""Infrared/visible image fusion with cross-attention and a reversed softmax."""
from . import functional  # noqa: F401  (installs Tensor operators)
from .autograd import Parameter, ParamStore, Tape, Tensor, grad_check
from .config import FuseConfig, variant_config

__all__ = ["FuseConfig", "Parameter", "ParamStore", "Tape", "Tensor", "grad_check", "variant_config"]
__version__ = "0.1.0"
