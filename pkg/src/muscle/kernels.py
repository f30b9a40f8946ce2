"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``MUSCLE_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("MUSCLE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
sinkhorn_log = _impl.sinkhorn_log

__all__ = ["BACKEND", "im2col", "col2im", "sinkhorn_log"]
