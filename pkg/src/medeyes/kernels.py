"""Kernel backend selection.

The compiled extension is used when it imports; ``MEDEYES_PURE_PYTHON=1``
forces the numpy fallback.
"""
from __future__ import annotations

import os

from medeyes import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MEDEYES_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from medeyes import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"

softmax_row = _impl.softmax_row
sample_index = _impl.sample_index
batch_log_probs = _impl.batch_log_probs
weighted_grad = _impl.weighted_grad
pool_labels = _impl.pool_labels
separated_pairs = _impl.separated_pairs

__all__ = [
    "BACKEND",
    "softmax_row",
    "sample_index",
    "batch_log_probs",
    "weighted_grad",
    "pool_labels",
    "separated_pairs",
]
