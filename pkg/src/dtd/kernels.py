"""Backend selection for the scoring kernels.

The compiled extension is used when it was built; otherwise (or when
``DTD_PURE_PYTHON=1``) the numpy fallback is used.  Both expose
``sq_dists``, ``kde_scores``, ``knn_scores`` and ``iforest_path_lengths``.
"""
import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("DTD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:
        compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

sq_dists = backend.sq_dists
kde_scores = backend.kde_scores
knn_scores = backend.knn_scores
iforest_path_lengths = backend.iforest_path_lengths
average_path_length = python_backend.average_path_length
