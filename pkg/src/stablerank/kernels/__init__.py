"""Hot-kernel dispatch.

The numerically heavy inner loops (masked softmax, rotary rotation, RMS
normalization, log-softmax) exist twice: a numba-jitted version and a
pure-NumPy fallback with identical contracts. The active backend is chosen
once at import time from the ``STABLERANK_KERNELS`` environment variable:

- ``auto`` (default): numba when importable, NumPy otherwise
- ``numba``: require the jitted kernels; fail loudly if numba is missing
- ``numpy``: force the fallback path

``benchmarks/bench_backends.py`` times the two paths against each other.
Both backends are deterministic for fixed inputs; they may differ from one
another by float round-off only (reduction orders differ).
"""

import os

from . import numpy_impl

_ENV_VAR = "STABLERANK_KERNELS"

_choice = os.environ.get(_ENV_VAR, "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"{_ENV_VAR} must be one of auto|numba|numpy, got {_choice!r}"
    )

if _choice == "numpy":
    _impl = numpy_impl
else:
    try:
        from . import numba_impl as _impl
    except ImportError:
        if _choice == "numba":
            raise ImportError(
                f"{_ENV_VAR}=numba but numba is not importable"
            ) from None
        _impl = numpy_impl


def backend_name() -> str:
    """Name of the active kernel backend ('numba' or 'numpy')."""
    return _impl.NAME


def get_backend(name: str):
    """Return a kernel implementation module by name (for benchmarks/tests)."""
    if name == "numpy":
        return numpy_impl
    if name == "numba":
        from . import numba_impl

        return numba_impl
    raise ValueError(f"unknown kernel backend {name!r}")


masked_softmax_fwd = _impl.masked_softmax_fwd
masked_softmax_bwd = _impl.masked_softmax_bwd
rope_fwd = _impl.rope_fwd
rope_bwd = _impl.rope_bwd
rms_norm_fwd = _impl.rms_norm_fwd
rms_norm_bwd = _impl.rms_norm_bwd
log_softmax_fwd = _impl.log_softmax_fwd
log_softmax_bwd = _impl.log_softmax_bwd
