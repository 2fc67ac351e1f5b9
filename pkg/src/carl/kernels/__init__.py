"""Hot kernels with a compiled backend and a pure-Python fallback.

The compiled extension is preferred; set ``CARL_FORCE_PYTHON=1`` to force the
fallback. ``BACKEND`` names the active implementation.
"""

import os

from . import _slow

if os.environ.get("CARL_FORCE_PYTHON", "") not in ("", "0"):
    _impl = _slow
else:
    try:
        from . import _fast as _impl
    except ImportError:
        _impl = _slow

BACKEND = "cython" if _impl is not _slow else "python"

solve_assignment = _impl.solve_assignment
match_batch = _impl.match_batch
silhouette_samples = _impl.silhouette_samples

__all__ = ["BACKEND", "solve_assignment", "match_batch", "silhouette_samples"]
