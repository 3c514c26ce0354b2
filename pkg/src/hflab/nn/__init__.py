"""Minimal differentiable-computation core."""

from hflab.nn.tensor import Tensor, no_grad, concat, matmul, reshape, transpose
from hflab.nn.functional import (
    activation,
    add_norm,
    causal_mask,
    layer_norm,
    linear,
    loss,
    lstm_layer,
    mae,
    mse,
    multi_head_attention,
    prelu,
    quantile_loss,
    scaled_dot_attention,
    sigmoid,
    sinusoidal_pe,
    softmax,
    spiking_activation,
    tanh,
)
from hflab.nn.optim import AdamWState, adamw_step
from hflab.nn.gradcheck import grad_check

__all__ = [
    "Tensor", "no_grad", "concat", "matmul", "reshape", "transpose",
    "activation", "add_norm", "causal_mask", "layer_norm", "linear", "loss", "lstm_layer", "mae", "mse",
    "multi_head_attention", "prelu", "quantile_loss", "scaled_dot_attention", "sigmoid", "sinusoidal_pe",
    "softmax", "spiking_activation", "tanh", "AdamWState", "adamw_step", "grad_check",
]
