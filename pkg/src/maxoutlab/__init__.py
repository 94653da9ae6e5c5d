"""Numerics for maxout network initialization."""

from .order_stats import OrderStatConstants, compute_constants, recommended_c
from .network import (
    Architecture,
    InitScheme,
    ParamSet,
    forward,
    init_params,
    input_jacobian,
    directional_derivative_sq,
    activation_length,
    param_gradients,
)

__version__ = "0.1.0"

__all__ = [
    "OrderStatConstants",
    "compute_constants",
    "recommended_c",
    "Architecture",
    "InitScheme",
    "ParamSet",
    "forward",
    "init_params",
    "input_jacobian",
    "directional_derivative_sq",
    "activation_length",
    "param_gradients",
]
