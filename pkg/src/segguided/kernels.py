"""Backend selection for the surface-distance kernels.

The compiled extension is used when importable; set ``SEGGUIDED_PURE_PYTHON=1``
to force the NumPy/SciPy fallback.
"""

import os

from . import _kernels_py

python_backend = _kernels_py
compiled_backend = None

if os.environ.get("SEGGUIDED_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:
        compiled_backend = None

backend = compiled_backend or python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

surface = backend.surface
squared_edt = backend.squared_edt
