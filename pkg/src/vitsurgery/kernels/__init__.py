"""Kernel backend selection.

Two interchangeable backends implement the hot per-step kernels
(layer norm, softmax, GELU, cross entropy, SGD updates):

* ``compiled``: the Cython extension ``_speedups``, preferred when built;
* ``python``:  the pure-numpy fallback in ``_numpy``.

The backend is chosen at import time (``VITSURGERY_KERNELS`` may force
``python`` or ``compiled``; the default ``auto`` prefers compiled) and can
be switched at runtime with :func:`use`, which the parity tests and the
benchmark rely on.  Matrix multiplication is not part of this surface: it
goes through numpy's BLAS in both backends.
"""

import os

from . import _numpy
from ..errors import InputError

_BACKENDS = {"python": _numpy}

try:
    from . import _speedups

    _BACKENDS["compiled"] = _speedups
except ImportError:  # extension not built; numpy fallback still works
    _speedups = None

_impl = _numpy


def available() -> tuple:
    """Names of importable backends."""
    return tuple(sorted(_BACKENDS))


def use(name: str) -> str:
    """Switch the active backend globally; returns the previous name."""
    global _impl
    if name not in _BACKENDS:
        raise InputError(f"unknown kernel backend {name!r}; available: {available()}")
    previous = _impl.NAME
    _impl = _BACKENDS[name]
    return previous


def active() -> str:
    return _impl.NAME


def backend(name: str):
    """Direct handle on one backend module (used by parity tests)."""
    if name not in _BACKENDS:
        raise InputError(f"unknown kernel backend {name!r}; available: {available()}")
    return _BACKENDS[name]


def layer_norm_forward(x, gamma, beta, eps):
    return _impl.layer_norm_forward(x, gamma, beta, eps)


def layer_norm_backward(gy, x, mean, rstd, gamma):
    return _impl.layer_norm_backward(gy, x, mean, rstd, gamma)


def softmax_forward(x):
    return _impl.softmax_forward(x)


def softmax_backward(y, gy):
    return _impl.softmax_backward(y, gy)


def gelu_forward(x):
    return _impl.gelu_forward(x)


def gelu_backward(x, cdf, gy):
    return _impl.gelu_backward(x, cdf, gy)


def cross_entropy_forward(logits, labels):
    return _impl.cross_entropy_forward(logits, labels)


def cross_entropy_backward(probs, labels, gscale):
    return _impl.cross_entropy_backward(probs, labels, gscale)


def sgd_update(param, grad, velocity, lr, momentum):
    return _impl.sgd_update(param, grad, velocity, lr, momentum)


def _select_initial() -> None:
    requested = os.environ.get("VITSURGERY_KERNELS", "auto").lower()
    if requested == "auto":
        use("compiled" if "compiled" in _BACKENDS else "python")
    else:
        use(requested)


_select_initial()
