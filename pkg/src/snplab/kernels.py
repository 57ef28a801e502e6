"""Backend selection for the loss/gradient hot loop.

The compiled ``snplab._kernel`` extension is used when it imports; otherwise
the numpy implementation in ``snplab._kernel_py`` takes over.  Setting
``SNPLAB_KERNEL=python`` forces the fallback.
"""

import os

from . import _kernel_py

BACKEND = "python"
_impl = _kernel_py.loss_and_grad

if os.environ.get("SNPLAB_KERNEL", "").lower() != "python":
    try:
        from . import _kernel
    except ImportError:  # extension not built
        _kernel = None
    else:
        BACKEND = "cython"
        _impl = _kernel.loss_and_grad
else:
    _kernel = None


def available_backends() -> dict:
    backends = {"python": _kernel_py.loss_and_grad}
    if _kernel is not None:
        backends["cython"] = _kernel.loss_and_grad
    return backends


def loss_and_grad(theta, x_dims, d_dims, relu, temperature, X, labels, D):
    return _impl(theta, x_dims, d_dims, relu, temperature, X, labels, D)
