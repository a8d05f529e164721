"""Minimal reverse-mode tensor engine used by the networks."""
from . import kernels
from .checkpoint import CheckpointError, decode_arrays, encode_arrays, load_arrays, save_arrays
from .ops import (
    BN_EPS,
    BN_MOMENTUM,
    BatchNormState,
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    flatten,
    fully_connected,
    global_avg_pool,
    mean_of,
    mse_loss,
    mul_broadcast,
    relu,
    scale,
    sigmoid,
    softmax_cross_entropy,
    sum_all,
    take_channel,
    weighted_sum,
)
from .optim import ParamSet, Schedule, lr_at_epoch, sgd_momentum_step
from .tensor import GraphError, ShapeError, Tensor, backward, grad_enabled, no_grad

__all__ = [
    "BN_EPS", "BN_MOMENTUM", "BatchNormState", "CheckpointError", "GraphError", "ParamSet",
    "Schedule", "ShapeError", "Tensor", "add", "backward", "batchnorm2d", "concat_channels",
    "conv2d", "decode_arrays", "encode_arrays", "flatten", "fully_connected",
    "global_avg_pool", "grad_enabled", "kernels", "load_arrays", "lr_at_epoch", "mean_of",
    "mse_loss", "mul_broadcast", "no_grad", "relu", "save_arrays", "scale",
    "sgd_momentum_step", "sigmoid", "softmax_cross_entropy", "sum_all", "take_channel",
    "weighted_sum",
]
