"""Kernel backend selection.

The compiled extension ``misa._kernels`` is used when it imports; otherwise
(or when ``MISA_PURE_PYTHON=1``) the numpy fallback is used. ``BACKEND``
names the active one.
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("MISA_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def _flat(x):
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1)


def _rows(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return x.reshape(-1, x.shape[-1]) if x.ndim else x.reshape(1, 1)


def elu(x, impl=None):
    impl = impl or _impl
    x = np.asarray(x, dtype=np.float64)
    return impl.elu_forward(_flat(x)).reshape(x.shape)


def elu_grad(x, g, impl=None):
    impl = impl or _impl
    x = np.asarray(x, dtype=np.float64)
    return impl.elu_backward(_flat(x), _flat(np.broadcast_to(g, x.shape))).reshape(x.shape)


def logsumexp_last(x, impl=None):
    """Log-sum-exp over the last axis, shape ``x.shape[:-1]``."""
    impl = impl or _impl
    x = np.asarray(x, dtype=np.float64)
    return impl.logsumexp_rows(_rows(x)).reshape(x.shape[:-1])


def softmax_last(x, lse=None, impl=None):
    impl = impl or _impl
    x = np.asarray(x, dtype=np.float64)
    if lse is None:
        lse = logsumexp_last(x, impl=impl)
    return impl.softmax_rows(_rows(x), _flat(lse)).reshape(x.shape)


def squash_logdet(u, impl=None):
    """Elementwise ``log(1 - tanh(u)**2)``, stable for large ``|u|``."""
    impl = impl or _impl
    u = np.asarray(u, dtype=np.float64)
    return impl.squash_logdet(_flat(u)).reshape(u.shape)


def squash_logdet_grad(u, g, impl=None):
    impl = impl or _impl
    u = np.asarray(u, dtype=np.float64)
    return impl.squash_logdet_backward(_flat(u), _flat(np.broadcast_to(g, u.shape))).reshape(u.shape)
