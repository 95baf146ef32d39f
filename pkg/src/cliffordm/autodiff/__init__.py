from .gradcheck import GradCheckReport, grad_check, module_grad_check
from .tensor import ConfigurationError, NumericError, Tensor, is_grad_enabled, no_grad
from . import ops

__all__ = [
    "Tensor", "no_grad", "is_grad_enabled", "ConfigurationError", "NumericError",
    "GradCheckReport", "grad_check", "module_grad_check", "ops",
]
