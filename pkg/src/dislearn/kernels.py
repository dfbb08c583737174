"""Backend selection for the latent-network kernels.

The compiled extension (dislearn._core, Cython) is preferred when it
imports; otherwise the pure-NumPy reference implementation is used.  Set
DISLEARN_KERNELS=python or =cython to force a backend (forcing cython
raises if the extension is missing).  Both backends implement forward,
jacobian, and loss_and_grad with identical semantics; parity is covered by
the test suite and benchmarks/bench_kernels.py compares their speed.
"""

import os

from . import kernels_py

_requested = os.environ.get("DISLEARN_KERNELS", "").lower()

if _requested == "python":
    _impl = kernels_py
    BACKEND = "python"
else:
    try:
        from . import _core as _impl
        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        _impl = kernels_py
        BACKEND = "python"

forward = _impl.forward
jacobian = _impl.jacobian
loss_and_grad = _impl.loss_and_grad
