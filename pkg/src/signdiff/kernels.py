"""Kernel dispatch: the compiled extension when built, else the pure-Python fallback.

Set ``SIGNDIFF_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py as python_kernels

compiled_kernels = None
if os.environ.get("SIGNDIFF_PURE_PYTHON") != "1":
    try:
        from . import _kernels as compiled_kernels
    except ImportError:
        compiled_kernels = None

if compiled_kernels is not None:
    BACKEND = "cython"
    dtw_accumulate = compiled_kernels.dtw_accumulate
else:
    BACKEND = "python"
    dtw_accumulate = python_kernels.dtw_accumulate
