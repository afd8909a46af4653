from __future__ import annotations

from .params import ParamSet
from .tensor import StateError


def effective_lr(lr: float, lr_decay: float, step_count: int) -> float:
    """Inverse-time decay: ``lr / (1 + lr_decay * step_count)``."""
    return lr / (1.0 + lr_decay * step_count)


def sgd_step(params: ParamSet, lr: float, lr_decay: float = 0.0, step_count: int = 0) -> ParamSet:
    """Apply one plain SGD update in place and clear the gradients.

    Raises :class:`StateError` if any trainable tensor has no gradient.
    """
    trainable = params.trainable()
    missing = [e.name for e in trainable if e.tensor.grad is None]
    if missing:
        raise StateError(f"no gradient for {missing}; run backward first")
    step = effective_lr(lr, lr_decay, step_count)
    for e in trainable:
        e.tensor.data -= step * e.tensor.grad
        e.tensor.grad = None
    return params
