"""Closest-point kernel backends.

The compiled Cython extension is preferred when built; a vectorized numpy
fallback provides the identical contract. Set MORPHFLOW_PURE_PYTHON=1 to force
the fallback (used by the benchmark and for debugging).
"""

import os

from . import numpy_backend

compiled = None
if os.environ.get("MORPHFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _closest_point as compiled  # type: ignore[no-redef]
    except ImportError:
        compiled = None

active = compiled if compiled is not None else numpy_backend


def backend_name() -> str:
    return active.NAME


__all__ = ["active", "compiled", "numpy_backend", "backend_name"]
