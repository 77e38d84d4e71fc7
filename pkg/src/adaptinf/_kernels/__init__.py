"""Hot-loop kernels: compiled extension when available, numpy otherwise.

Set ``ADAPTINF_PURE_PYTHON=1`` to force the numpy implementation.
"""

import os

from . import _fallback

try:
    if os.environ.get("ADAPTINF_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from . import _core as _impl

    BACKEND = "compiled"
except ImportError:
    _impl = _fallback
    BACKEND = "python"

knn_pool_predict = _impl.knn_pool_predict
knn_brute_predict = _impl.knn_brute_predict
thompson_probs = _impl.thompson_probs

__all__ = ["BACKEND", "knn_pool_predict", "knn_brute_predict", "thompson_probs"]
