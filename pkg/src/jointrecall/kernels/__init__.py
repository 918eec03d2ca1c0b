"""Hot loops behind the pattern generators, sparse attention and the recurrence.

Two interchangeable backends exist: ``_numba`` (compiled) and ``_numpy``
(vectorised reference). The numba path is used when numba imports and the
environment variable ``JOINTRECALL_NUMBA`` is not set to ``0``.
"""

import os

from . import _numpy as numpy_backend

_wanted = os.environ.get("JOINTRECALL_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

numba_backend = None
if _wanted:
    try:
        from . import _numba as numba_backend
    except ImportError:  # numba missing or broken: fall back silently
        numba_backend = None

backend = numba_backend if numba_backend is not None else numpy_backend
BACKEND_NAME = "numba" if backend is numba_backend else "numpy"

lsh_rows = backend.lsh_rows
ks_rows = backend.ks_rows
union_rows = backend.union_rows
attn_forward = backend.attn_forward
attn_backward = backend.attn_backward
scan_forward = backend.scan_forward
scan_backward = backend.scan_backward
rank_loss = backend.rank_loss

__all__ = [
    "BACKEND_NAME",
    "attn_backward",
    "attn_forward",
    "backend",
    "ks_rows",
    "lsh_rows",
    "numba_backend",
    "numpy_backend",
    "rank_loss",
    "scan_backward",
    "scan_forward",
    "union_rows",
]
