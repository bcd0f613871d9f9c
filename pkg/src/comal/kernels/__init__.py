"""Numeric kernels for the integrator, with backend selection at import.

The compiled extension is used when available; otherwise the numpy
fallback takes over transparently. Set ``COMAL_PURE_PYTHON=1`` to force
the fallback (useful for benchmarking and debugging).
"""
import os

from . import _numpy

if os.environ.get("COMAL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _numpy
    BACKEND = "python"
else:
    try:
        from . import _native as _impl
        BACKEND = "native"
    except ImportError:
        _impl = _numpy
        BACKEND = "python"

idm_acceleration = _impl.idm_acceleration
safe_speed = _impl.safe_speed

__all__ = ["BACKEND", "idm_acceleration", "safe_speed"]
