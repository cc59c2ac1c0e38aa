"""Tensor autograd core: ops, losses, seeded randomness and the optimizer."""

from avaction.numerics.functional import (
    ConfigurationError,
    DimensionError,
    InputTooShortError,
    binary_cross_entropy,
    causal_mask,
    conv1d_time,
    cross_entropy,
    gelu,
    gumbel_softmax_sample,
    layer_norm,
    linear,
    log_softmax,
    masked_fill,
    multi_head_attention,
    sinusoidal_positions,
    softmax,
)
from avaction.numerics.optim import AdamState, TrainingDivergenceError, adam_step
from avaction.numerics.rng import RngState
from avaction.numerics.tensor import Tensor, as_tensor, concat, embedding, no_grad, stack

__all__ = [
    "AdamState",
    "ConfigurationError",
    "DimensionError",
    "InputTooShortError",
    "RngState",
    "Tensor",
    "TrainingDivergenceError",
    "adam_step",
    "as_tensor",
    "binary_cross_entropy",
    "causal_mask",
    "concat",
    "conv1d_time",
    "cross_entropy",
    "embedding",
    "gelu",
    "gumbel_softmax_sample",
    "layer_norm",
    "linear",
    "log_softmax",
    "masked_fill",
    "multi_head_attention",
    "no_grad",
    "sinusoidal_positions",
    "softmax",
    "stack",
]
