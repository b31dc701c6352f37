"""Backend selection for the scalar kernels.

The compiled extension is used when it was built; setting
``STGNPP_PURE_PYTHON=1`` forces the pure-Python fallback.
"""
import os

if os.environ.get("STGNPP_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_py as _impl
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "compiled"
    except ImportError:
        from . import _kernels_py as _impl
        BACKEND = "python"

thin_chunk = _impl.thin_chunk
hazard_integral = _impl.hazard_integral
intensity_at = _impl.intensity_at
hazard_median = _impl.hazard_median
excitation_before = _impl.excitation_before
BoundViolation = _impl.BoundViolation

__all__ = [
    "BACKEND", "thin_chunk", "hazard_integral", "intensity_at", "hazard_median",
    "excitation_before", "BoundViolation",
]
