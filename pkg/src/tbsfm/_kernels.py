"""Backend selection for the RANSAC/P3P kernels.

The compiled extension is used when present; ``TBSFM_PURE_PYTHON=1`` forces
the pure-Python fallback.
"""
import logging
import os

log = logging.getLogger(__name__)

if os.environ.get("TBSFM_PURE_PYTHON") == "1":
    from . import _pykernels as backend
else:
    try:
        from . import _ckernels as backend
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using pure Python")
        from . import _pykernels as backend

BACKEND = "cython" if backend.__name__.endswith("_ckernels") else "python"
p3p = backend.p3p
ransac_chunk = backend.ransac_chunk
iterations_needed = backend.iterations_needed
count_inliers = backend.count_inliers
