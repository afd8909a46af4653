"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy versions in ``_kernels_py`` take over. Set ``FLEXCHILL_PURE_PYTHON=1``
to force the fallback (the benchmark and the parity tests do this).
"""

import importlib
import os

from . import _kernels_py


def load_backend(name: str):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        return importlib.import_module("flexchill._ckernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def _select():
    if os.environ.get("FLEXCHILL_PURE_PYTHON", "") not in ("", "0"):
        return _kernels_py
    try:
        return load_backend("cython")
    except ImportError:
        return _kernels_py


_impl = _select()

BACKEND = _impl.BACKEND
im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
