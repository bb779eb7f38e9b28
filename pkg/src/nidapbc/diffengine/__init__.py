"""Nested differentiation: reverse mode over parameters, up to two forward levels over state."""
from . import ops
from .api import (
    NumericError,
    directional_derivative,
    gradient_params,
    gradient_x,
    hessian_x,
    jacobian_x,
    value_and_gradient_x,
    value_and_jacobian_x,
)
from .dual import Dual, NestingError, value
from .tensor import GraphError, Tensor, no_grad

__all__ = [
    "Dual",
    "GraphError",
    "NestingError",
    "NumericError",
    "Tensor",
    "directional_derivative",
    "gradient_params",
    "gradient_x",
    "hessian_x",
    "jacobian_x",
    "no_grad",
    "ops",
    "value",
    "value_and_gradient_x",
    "value_and_jacobian_x",
]
