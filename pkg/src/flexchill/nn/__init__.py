"""Minimal float64 tensor engine with reverse-mode autodiff."""

from .gradcheck import finite_difference_gradient, max_relative_error
from .ops import (
    adaptive_avgpool1d,
    batchnorm1d,
    ce_loss_t,
    conv1d,
    conv2d,
    dense,
    flatten,
    log_softmax_t,
    maxpool1d,
    maxpool2d,
    relu,
    reshape,
    softmax_t,
)
from .optim import effective_lr, sgd_step
from .params import BATCHNORM_ROLES, ROLES, ParamSet
from .tensor import NumericError, StateError, Tape, Tensor, active_tape, backward

__all__ = [
    "BATCHNORM_ROLES",
    "NumericError",
    "ParamSet",
    "ROLES",
    "StateError",
    "Tape",
    "Tensor",
    "active_tape",
    "adaptive_avgpool1d",
    "backward",
    "batchnorm1d",
    "ce_loss_t",
    "conv1d",
    "conv2d",
    "dense",
    "effective_lr",
    "finite_difference_gradient",
    "flatten",
    "log_softmax_t",
    "max_relative_error",
    "maxpool1d",
    "maxpool2d",
    "relu",
    "reshape",
    "sgd_step",
    "softmax_t",
]
