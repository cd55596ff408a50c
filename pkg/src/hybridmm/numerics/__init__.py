"""Float64 tensor substrate with reverse-mode autodiff."""

from . import functional
from .functional import matmul, rms_norm, softmax
from .gradcheck import GradCheckReport, grad_check
from .module import Linear, Module, Parameter, RMSNorm, param_checksum, xavier_uniform
from .rng import Rng
from .tensor import DimensionError, NumericError, Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "DimensionError",
    "GradCheckReport",
    "Linear",
    "Module",
    "NumericError",
    "Parameter",
    "RMSNorm",
    "Rng",
    "Tensor",
    "as_tensor",
    "functional",
    "grad_check",
    "is_grad_enabled",
    "matmul",
    "no_grad",
    "param_checksum",
    "rms_norm",
    "softmax",
    "xavier_uniform",
]
