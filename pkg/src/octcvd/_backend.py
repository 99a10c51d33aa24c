"""Kernel backend selection.

The compiled extension is used when it imports; ``OCTCVD_PURE_PYTHON=1``
forces the numpy fallback.
"""
import os

from . import _fallback

if os.environ.get("OCTCVD_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _kernels as kernels
        NAME = "compiled"
    except ImportError:  # extension not built
        kernels = _fallback
        NAME = "python"
else:
    kernels = _fallback
    NAME = "python"

fallback = _fallback
