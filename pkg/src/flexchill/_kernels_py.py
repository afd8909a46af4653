"""Numpy implementations of the patch/pool kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors every function
with the same signature and the same floating-point accumulation order, so
both backends produce bit-identical results.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "python"


def im2col(xp, kh, kw, sh, sw):
    """Unfold a padded (N, C, H, W) batch into rows of receptive fields.

    Returns an array of shape (N*OH*OW, C*kh*kw), rows ordered (n, oh, ow)
    and columns ordered (c, i, j).
    """
    n, c, h, w = xp.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    win = win[:, :, :oh, :ow]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im(cols, n, c, h, w, kh, kw, sh, sw):
    """Adjoint of :func:`im2col`: scatter-add rows back to (N, C, H, W)."""
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    g = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h, w))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += g[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def maxpool_forward(x, kh, kw):
    """Non-overlapping max pool (stride == kernel, trailing rows/cols dropped).

    Returns ``(out, argmax)`` where ``argmax`` holds the winning flat offset
    ``i*kw + j`` inside each window (first maximum on ties).
    """
    n, c, h, w = x.shape
    oh, ow = h // kh, w // kw
    v = x[:, :, : oh * kh, : ow * kw].reshape(n, c, oh, kh, ow, kw)
    v = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, kh * kw)
    arg = v.argmax(axis=-1)
    out = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward(g, arg, h, w, kh, kw):
    n, c, oh, ow = g.shape
    onehot = np.zeros((n, c, oh, ow, kh * kw))
    np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
    blocks = onehot.reshape(n, c, oh, ow, kh, kw).transpose(0, 1, 2, 4, 3, 5)
    out = np.zeros((n, c, h, w))
    out[:, :, : oh * kh, : ow * kw] = blocks.reshape(n, c, oh * kh, ow * kw)
    return out
