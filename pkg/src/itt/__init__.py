"""Desk-scale inner-thinking transformer lab.

A byte-level decoder-only transformer whose thinking layers refine token
states over multiple routed steps, next to vanilla and loop baselines;
includes training, elastic inference, compute accounting and diagnostics.
"""

from .config import ConfigError, TrainConfig, config_from_dict, config_to_dict, load_config
from .flops import FlopsBreakdown, count_flops
from .model import ModelConfig, init_params, model_forward
from .routing import RoutingPolicy, RoutingTrace, capacity_schedule, decode_gate
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    default_dtype,
    grad_check,
    no_grad,
    precision,
    set_default_dtype,
)
from .training import evaluate_perplexity, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FlopsBreakdown",
    "ModelConfig",
    "NonFiniteError",
    "RoutingPolicy",
    "RoutingTrace",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "capacity_schedule",
    "config_from_dict",
    "config_to_dict",
    "count_flops",
    "decode_gate",
    "default_dtype",
    "evaluate_perplexity",
    "grad_check",
    "init_params",
    "load_config",
    "model_forward",
    "no_grad",
    "precision",
    "set_default_dtype",
    "train",
    "__version__",
]
