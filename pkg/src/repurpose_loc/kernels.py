"""Kernel dispatch: the compiled extension when importable, else pure Python.

Set ``REPURPOSE_LOC_PURE=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("REPURPOSE_LOC_PURE", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

tiou_matrix = _impl.tiou_matrix
soft_nms = _impl.soft_nms
greedy_match = _impl.greedy_match

__all__ = ["BACKEND", "greedy_match", "soft_nms", "tiou_matrix"]
