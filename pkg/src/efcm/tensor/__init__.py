from . import functional, nn
from .core import NonFiniteError, Tensor, concat, grad_enabled, matmul, no_grad, stack, tensor
from .gradcheck import grad_check, projected

__all__ = [
    "NonFiniteError",
    "Tensor",
    "concat",
    "functional",
    "grad_check",
    "grad_enabled",
    "matmul",
    "nn",
    "no_grad",
    "projected",
    "stack",
    "tensor",
]
