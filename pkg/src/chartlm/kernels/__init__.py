"""Backend selection for the hot kernels.

``CHARTLM_BACKEND`` picks the implementation:

* ``numba`` — require the jitted kernels (ImportError if numba is missing)
* ``numpy`` — force the pure-numpy fallback
* unset / ``auto`` — numba when importable, numpy otherwise

``benchmarks/bench_backends.py`` compares the two paths on the real
composition workload.
"""
from __future__ import annotations

import os

_choice = os.environ.get("CHARTLM_BACKEND", "auto").lower()

if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(f"CHARTLM_BACKEND must be auto|numba|numpy, got {_choice!r}")

if _choice == "numpy":
    from . import numpy_impl as _impl
    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl  # type: ignore[no-redef]
        BACKEND = "numba"
    except ImportError:
        if _choice == "numba":
            raise
        from . import numpy_impl as _impl  # type: ignore[no-redef]
        BACKEND = "numpy"

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
log_softmax_fwd = _impl.log_softmax_fwd
log_softmax_bwd = _impl.log_softmax_bwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
adamw_update = _impl.adamw_update
scatter_add_rows = _impl.scatter_add_rows

__all__ = [
    "BACKEND", "softmax_fwd", "softmax_bwd", "log_softmax_fwd", "log_softmax_bwd",
    "layer_norm_fwd", "layer_norm_bwd", "gelu_fwd", "gelu_bwd",
    "adamw_update", "scatter_add_rows",
]
