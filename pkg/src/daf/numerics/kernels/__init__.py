"""Kernel backend selection.

The compiled Cython extension is preferred when present; the NumPy fallback
is always available. Selection happens once at import time and is exposed via
``BACKEND``. Set ``DAF_KERNELS=py`` or ``DAF_KERNELS=ext`` to force a backend
(``ext`` raises if the extension is not built).
"""

from __future__ import annotations

import os

from . import _py

_requested = os.environ.get("DAF_KERNELS", "auto").lower()

if _requested not in ("auto", "ext", "py"):
    raise RuntimeError(f"DAF_KERNELS must be auto|ext|py, got {_requested!r}")

if _requested == "py":
    _impl = _py
    BACKEND = "py"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "ext"
    except ImportError:
        if _requested == "ext":
            raise RuntimeError("DAF_KERNELS=ext but the compiled extension is not built")
        _impl = _py
        BACKEND = "py"

conv1d_fwd = _impl.conv1d_fwd
conv1d_bwd = _impl.conv1d_bwd
masked_softmax_fwd = _impl.masked_softmax_fwd
masked_softmax_bwd = _impl.masked_softmax_bwd


def using_extension() -> bool:
    return BACKEND == "ext"
