"""Pick the compiled kernel when it is importable, else the numpy fallback.

Setting ``META_LAB_PURE=1`` forces the fallback (used by the benchmark and
the parity tests).
"""

from __future__ import annotations

import os

from . import _fallback
from ._fallback import KernelDomainError

__all__ = ["BACKEND", "KernelDomainError", "Rhs", "rhs_core", "fallback", "compiled"]

fallback = _fallback
compiled = None

if os.environ.get("META_LAB_PURE", "") in ("", "0"):
    try:
        from . import _kernels as compiled
    except ImportError:  # extension not built
        compiled = None

_active = compiled if compiled is not None else _fallback
BACKEND = "compiled" if compiled is not None else "numpy"
Rhs = _active.Rhs
rhs_core = _active.rhs_core
