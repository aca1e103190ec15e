"""Backend switch for the hot numeric kernels.

``DRIP_BACKEND=numpy`` (or ``DRIP_DISABLE_NUMBA=1``) selects the vectorised
numpy implementations; otherwise numba-compiled loops are used when numba
imports cleanly.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _requested_backend():
    if os.environ.get("DRIP_DISABLE_NUMBA", "") == "1":
        return "numpy"
    backend = os.environ.get("DRIP_BACKEND", "numba").strip().lower()
    if backend not in ("numba", "numpy"):
        raise ValueError(f"DRIP_BACKEND must be 'numba' or 'numpy', got {backend!r}")
    return backend


BACKEND = _requested_backend() if numba is not None else "numpy"
HAS_NUMBA = numba is not None


def njit(func):
    """Compile ``func`` with numba if available, else return it unchanged."""
    if numba is None:
        return func
    return numba.njit(cache=True, nogil=True)(func)
