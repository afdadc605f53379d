"""Minimal reverse-mode autodiff over NCHW arrays, sized for the estimators."""

from .tensor import Tape, Tensor, active_tape, as_tensor, record_op, set_check_finite
from .ops import (
    add,
    batchnorm2d,
    concat,
    conv2d,
    mse_loss,
    mul,
    reduce_mean,
    relu,
    sigmoid,
    slice_channels,
    tanh,
)
from .nn import (
    BatchNorm,
    ConvParams,
    GruParams,
    gru_cell,
    kaiming_init,
    make_batchnorm,
    make_conv,
    make_gru,
)
from .optim import AdamState, adam_step, init_adam
from .serialize import architecture_hash, load_weights, save_weights

__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "record_op",
    "set_check_finite",
    "add",
    "mul",
    "concat",
    "tanh",
    "sigmoid",
    "relu",
    "conv2d",
    "batchnorm2d",
    "reduce_mean",
    "mse_loss",
    "slice_channels",
    "BatchNorm",
    "ConvParams",
    "GruParams",
    "gru_cell",
    "kaiming_init",
    "make_batchnorm",
    "make_conv",
    "make_gru",
    "AdamState",
    "adam_step",
    "init_adam",
    "architecture_hash",
    "load_weights",
    "save_weights",
]
