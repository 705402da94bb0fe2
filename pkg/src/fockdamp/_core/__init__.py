"""Hot loops of the pipeline, compiled when the extension is available.

``BACKEND`` names the implementation picked at import time: ``"cython"`` when
the compiled module ``_kernels`` imports, otherwise ``"python"``.  Setting the
environment variable ``FOCKDAMP_BACKEND=python`` forces the fallback.
"""
import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("FOCKDAMP_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

if compiled_backend is not None:
    BACKEND = "cython"
    filter_forward = compiled_backend.filter_forward
    fixed_point = compiled_backend.fixed_point
else:
    BACKEND = "python"
    filter_forward = python_backend.filter_forward
    fixed_point = python_backend.fixed_point

__all__ = ["BACKEND", "filter_forward", "fixed_point", "python_backend", "compiled_backend"]
