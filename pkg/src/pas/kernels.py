"""Hot-loop kernels, compiled when available.

The Cython build (``pas._core``) is preferred; ``pas._pycore`` is used when
the extension is missing or ``PAS_PURE_PYTHON=1`` is set. Both expose
``front_ranks``, ``component_labels`` and ``select_topk`` with identical
semantics.
"""
from __future__ import annotations

import os

from pas import _pycore

if os.environ.get("PAS_PURE_PYTHON") == "1":
    _impl = _pycore
    BACKEND = "python"
else:
    try:
        from pas import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pycore
        BACKEND = "python"

front_ranks = _impl.front_ranks
component_labels = _impl.component_labels
select_topk = _impl.select_topk

BACKENDS = {"python": _pycore}
if BACKEND == "cython":
    BACKENDS["cython"] = _impl
