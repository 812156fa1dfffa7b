"""Hot-kernel backend selection.

Two interchangeable implementations of the fused kernels exist:

* ``advseq._kernels._native`` — Cython extension, built by setup.py;
* ``advseq._kernels.numpy_backend`` — pure NumPy, always available.

The native backend is picked at import when present; ``ADVSEQ_KERNELS=numpy``
forces the fallback, ``ADVSEQ_KERNELS=native`` fails loudly if the extension
is missing. ``set_backend()`` switches at runtime (used by the benchmark and
the parity tests).

Results of the two backends agree to float rounding, not bit-for-bit; all
bit-exactness guarantees elsewhere in the package hold within one backend.
"""

from __future__ import annotations

import os

from . import numpy_backend

try:
    from . import _native
except ImportError:  # extension not built
    _native = None

_KERNEL_NAMES = (
    "softmax_fwd",
    "softmax_bwd",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "nll_fwd",
    "nll_bwd",
    "adam_step",
    "scatter_add_rows",
)

backend_name = "numpy"


def available_backends() -> tuple[str, ...]:
    return ("numpy", "native") if _native is not None else ("numpy",)


def set_backend(name: str) -> None:
    """Point the module-level kernel functions at the named backend."""
    global backend_name
    if name == "numpy":
        mod = numpy_backend
    elif name == "native":
        if _native is None:
            raise ImportError("advseq._kernels._native extension is not built")
        mod = _native
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    for fn in _KERNEL_NAMES:
        globals()[fn] = getattr(mod, fn)
    backend_name = name


_requested = os.environ.get("ADVSEQ_KERNELS")
if _requested:
    set_backend(_requested)
else:
    set_backend("native" if _native is not None else "numpy")
