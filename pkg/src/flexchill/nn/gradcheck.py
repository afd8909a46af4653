"""Central finite differences, used as an independent oracle for backward."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .params import ParamSet
from .tensor import Tensor


def _named(params) -> dict[str, Tensor]:
    if isinstance(params, ParamSet):
        return {e.name: e.tensor for e in params.trainable()}
    return dict(params)


def finite_difference_gradient(
    f: Callable[[], float],
    params: ParamSet | Mapping[str, Tensor],
    step: float = 1e-5,
    entries: Mapping[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Estimate ``df/dw`` by ``(f(w+h) - f(w-h)) / 2h`` for each scalar entry.

    ``f`` is called with no arguments and must read the current tensor
    values. ``entries`` optionally restricts each tensor to a set of flat
    indices; the result then holds one value per requested index, in order.
    Tensors are restored exactly after every probe.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    out = {}
    for name, t in _named(params).items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size) if entries is None else np.asarray(entries[name])
        est = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f())
            flat[i] = orig - step
            fm = float(f())
            flat[i] = orig
            est[k] = (fp - fm) / (2.0 * step)
        out[name] = est.reshape(t.shape) if entries is None else est
    return out


def max_relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8, scale_floor: float = 1e-3
) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor, scale_floor * max|a|)``.

    The scale floor keeps entries that are tiny next to the rest of the
    tensor from being judged on rounding noise alone.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if not a.size:
        return 0.0
    scale = scale_floor * max(np.abs(a).max(), np.abs(n).max())
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor, scale))
    return float(np.max(np.abs(a - n) / denom))
