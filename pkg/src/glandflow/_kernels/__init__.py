"""Hot kernels: compiled Cython core with a pure-Python fallback chosen at import.

Set ``GLANDFLOW_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("GLANDFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

label_components = _active.label_components
grow_regions = _active.grow_regions
conv3x3_forward = _active.conv3x3_forward
conv3x3_backward = _active.conv3x3_backward

__all__ = [
    "BACKEND",
    "compiled_backend",
    "python_backend",
    "label_components",
    "grow_regions",
    "conv3x3_forward",
    "conv3x3_backward",
]
