"""Select the compiled kernel when importable; ``PICL_PURE_PYTHON=1`` forces the fallback."""
import os

from . import _kernels_py

if os.environ.get("PICL_PURE_PYTHON"):
    _ext = None
else:
    try:
        from . import _kernels_ext as _ext
    except ImportError:
        _ext = None

BACKEND = "cython" if _ext is not None else "python"
kernels = _ext if _ext is not None else _kernels_py
python_kernels = _kernels_py
compiled_kernels = _ext
