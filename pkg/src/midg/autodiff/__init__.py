"""Small reverse-mode autodiff engine on top of numpy."""

from .gradcheck import NumericError, gradcheck, gradcheck_params, numeric_param_grad
from .nn import MLP, Linear, Module, parameter
from .optim import Adam
from .tensor import (
    AutodiffError,
    ConfigError,
    ContractError,
    DomainError,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    default_dtype,
    dropout,
    get_default_dtype,
    grad_reverse,
    keyed_rng,
    matmul,
    softmax,
    stack,
)

__all__ = [
    "Adam",
    "AutodiffError",
    "ConfigError",
    "ContractError",
    "DomainError",
    "Linear",
    "MLP",
    "Module",
    "NumericError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "concat",
    "default_dtype",
    "dropout",
    "get_default_dtype",
    "grad_reverse",
    "gradcheck",
    "gradcheck_params",
    "numeric_param_grad",
    "keyed_rng",
    "matmul",
    "parameter",
    "softmax",
    "stack",
]
