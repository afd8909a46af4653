"""Differentiable operations.

Every function takes :class:`Tensor` (or array-like) inputs, computes the
forward value with numpy, and records a closure that maps the output
gradient to input gradients.
"""

from __future__ import annotations

import numpy as np

from .. import kernels
from .tensor import NumericError, Tensor, as_tensor, record

__all__ = [
    "add",
    "sub",
    "mul",
    "power",
    "matmul",
    "sum_all",
    "reshape",
    "flatten",
    "dense",
    "relu",
    "conv2d",
    "conv1d",
    "maxpool2d",
    "maxpool1d",
    "batchnorm1d",
    "adaptive_avgpool1d",
    "softmax_t",
    "log_softmax_t",
    "ce_loss_t",
]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return record(a.data**exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a) -> Tensor:
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


# ---------------------------------------------------------------- layers


def dense(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight shaped (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    out = x.data @ weight.data.T
    if bias is None:
        return record(out, (x, weight), lambda g: (g @ weight.data, g.T @ x.data))
    bias = as_tensor(bias)
    out = out + bias.data
    return record(
        out,
        (x, weight, bias),
        lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)),
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _conv(x4: Tensor, w4: np.ndarray, bias: np.ndarray | None, stride, pad):
    """Shared forward for conv1d/conv2d on 4-D views. Returns (out, cols, xp_shape)."""
    (ph, pw), (sh, sw) = pad, stride
    xp = x4
    if ph or pw:
        xp = np.pad(x4, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    xp = np.ascontiguousarray(xp)
    n, _, h, w = xp.shape
    o, _, kh, kw = w4.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"input {x4.shape[2:]} too small for kernel {(kh, kw)}")
    cols = kernels.im2col(xp, kh, kw, sh, sw)
    out = cols @ w4.reshape(o, -1).T
    if bias is not None:
        out = out + bias
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols, xp.shape


def _conv_backward(g4, x_shape, w4, cols, xp_shape, stride, pad):
    (ph, pw), (sh, sw) = pad, stride
    o, _, kh, kw = w4.shape
    gr = g4.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = (gr.T @ cols).reshape(w4.shape)
    gcols = np.ascontiguousarray(gr @ w4.reshape(o, -1))
    gxp = kernels.col2im(gcols, *xp_shape, kh, kw, sh, sw)
    gx = gxp[:, :, ph : ph + x_shape[2], pw : pw + x_shape[3]]
    return gx, gw, gr.sum(axis=0)


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation, input (N, C, H, W), weight (O, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    stride = (stride, stride) if np.isscalar(stride) else tuple(stride)
    padding = (padding, padding) if np.isscalar(padding) else tuple(padding)
    b = None if bias is None else as_tensor(bias)
    out, cols, xp_shape = _conv(x.data, weight.data, None if b is None else b.data, stride, padding)

    def back(g):
        gx, gw, gb = _conv_backward(g, x.shape, weight.data, cols, xp_shape, stride, padding)
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, weight) if b is None else (x, weight, b)
    return record(out, inputs, back)


def conv1d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """1-D cross-correlation, input (N, C, L), weight (O, C, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    b = None if bias is None else as_tensor(bias)
    x4 = x.data[:, :, None, :]
    w4 = weight.data[:, :, None, :]
    st, pd = (1, stride), (0, padding)
    out, cols, xp_shape = _conv(x4, w4, None if b is None else b.data, st, pd)

    def back(g):
        gx, gw, gb = _conv_backward(g[:, :, None, :], x4.shape, w4, cols, xp_shape, st, pd)
        gx, gw = gx[:, :, 0, :], gw[:, :, 0, :]
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, weight) if b is None else (x, weight, b)
    return record(out[:, :, 0, :], inputs, back)


def maxpool2d(x, kernel_size=2) -> Tensor:
    """Max pool with stride equal to the kernel size."""
    x = as_tensor(x)
    kh, kw = (kernel_size, kernel_size) if np.isscalar(kernel_size) else tuple(kernel_size)
    out, arg = kernels.maxpool_forward(np.ascontiguousarray(x.data), kh, kw)
    h, w = x.shape[2:]
    return record(out, (x,), lambda g: (kernels.maxpool_backward(np.ascontiguousarray(g), arg, h, w, kh, kw),))


def maxpool1d(x, kernel_size=2) -> Tensor:
    x = as_tensor(x)
    k = int(kernel_size)
    out, arg = kernels.maxpool_forward(np.ascontiguousarray(x.data[:, :, None, :]), 1, k)
    length = x.shape[2]

    def back(g):
        gx = kernels.maxpool_backward(np.ascontiguousarray(g[:, :, None, :]), arg, 1, length, 1, k)
        return (gx[:, :, 0, :],)

    return record(out[:, :, 0, :], (x,), back)


def batchnorm1d(x, gamma, beta, running_mean, running_var, train: bool, momentum=0.1, eps=1e-5) -> Tensor:
    """Batch norm over (N, C) or (N, C, L) inputs, per channel.

    In train mode the batch statistics normalize the input and the running
    buffers (plain arrays, updated in place) move by ``momentum``; the
    running variance uses the unbiased estimate. Eval mode reads the
    running buffers only.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0,) if x.ndim == 2 else (0, 2)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    rm = running_mean.data if isinstance(running_mean, Tensor) else running_mean
    rv = running_var.data if isinstance(running_var, Tensor) else running_var
    g_ = gamma.data.reshape(bshape)

    if train:
        m = x.data.size // x.shape[1]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if m > 1:
            rm *= 1.0 - momentum
            rm += momentum * mean
            rv *= 1.0 - momentum
            rv += momentum * var * (m / (m - 1))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)

        def back(g):
            gxhat = g * g_
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        inv = 1.0 / np.sqrt(rv + eps)
        xhat = (x.data - rm.reshape(bshape)) * inv.reshape(bshape)

        def back(g):
            return g * g_ * inv.reshape(bshape), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * g_ + beta.data.reshape(bshape)
    return record(out, (x, gamma, beta), back)


def adaptive_avgpool1d(x, output_size: int = 1) -> Tensor:
    """Average pool (N, C, L) to (N, C, output_size) with adaptive bin edges."""
    x = as_tensor(x)
    length = x.shape[2]
    bins = [
        (i * length // output_size, -(-(i + 1) * length // output_size)) for i in range(output_size)
    ]
    out = np.stack([x.data[:, :, s:e].mean(axis=2) for s, e in bins], axis=2)

    def back(g):
        gx = np.zeros(x.shape)
        for i, (s, e) in enumerate(bins):
            gx[:, :, s:e] += g[:, :, i : i + 1] / (e - s)
        return (gx,)

    return record(out, (x,), back)


# ---------------------------------------------------------------- softmax / loss


def _check_temperature(T: float) -> float:
    T = float(T)
    if not T > 0 or not np.isfinite(T):
        raise ValueError(f"temperature must be positive and finite, got {T}")
    return T


def _check_logits(z: np.ndarray) -> None:
    if z.ndim != 2:
        raise ValueError(f"logits must be 2-D (batch, classes), got shape {z.shape}")
    if np.isnan(z).any():
        raise NumericError("NaN in logits")


def _probs(z: np.ndarray, T: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise softmax(z/T) and log-softmax(z/T), max-subtracted."""
    s = z / T
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    tot = e.sum(axis=1, keepdims=True)
    return e / tot, s - np.log(tot)


def softmax_t(logits, T: float) -> Tensor:
    """Temperature softmax of a (batch, C) logit matrix."""
    z = as_tensor(logits)
    T = _check_temperature(T)
    _check_logits(z.data)
    p, _ = _probs(z.data, T)

    def back(g):
        return ((p * (g - (g * p).sum(axis=1, keepdims=True))) / T,)

    return record(p, (z,), back)


def log_softmax_t(logits, T: float) -> np.ndarray:
    z = as_tensor(logits)
    T = _check_temperature(T)
    _check_logits(z.data)
    return _probs(z.data, T)[1]


def ce_loss_t(logits, labels, T: float, reduction: str = "mean", return_probs: bool = False):
    """Cross-entropy of ``softmax(logits / T)`` against integer labels.

    The logit gradient is ``(p - onehot(labels)) / T`` per row, divided by
    the batch size under ``reduction="mean"``.
    """
    z = as_tensor(logits)
    T = _check_temperature(T)
    _check_logits(z.data)
    labels = np.asarray(labels)
    n, c = z.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    labels = labels.astype(np.intp)
    p, logp = _probs(z.data, T)
    rows = np.arange(n)
    per = -logp[rows, labels]
    scale = 1.0 / n if reduction == "mean" else 1.0
    value = per.sum() * scale

    def back(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (g * scale / T),)

    out = record(np.asarray(value), (z,), back)
    return (out, p) if return_probs else out
