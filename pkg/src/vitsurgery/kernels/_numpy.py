"""Pure-numpy kernel implementations.

This is the fallback backend: every function here has a drop-in compiled
twin in ``_speedups.pyx``.  All inputs are C-contiguous float32 or float64
arrays; row-wise kernels take 2-D inputs of shape (rows, width).
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

NAME = "python"


def layer_norm_forward(x, gamma, beta, eps):
    """Normalize each row to zero mean / unit population variance, then affine.

    Returns (y, mean, rstd); mean and rstd are kept for the backward pass.
    """
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    y = xhat * gamma + beta
    return y.astype(x.dtype, copy=False), mean.astype(x.dtype, copy=False), rstd.astype(x.dtype, copy=False)


def layer_norm_backward(gy, x, mean, rstd, gamma):
    xhat = (x - mean[:, None]) * rstd[:, None]
    gxhat = gy * gamma
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = (gxhat - m1 - xhat * m2) * rstd[:, None]
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    dt = x.dtype
    return gx.astype(dt, copy=False), ggamma.astype(dt, copy=False), gbeta.astype(dt, copy=False)


def softmax_forward(x):
    """Row softmax with max subtraction for overflow safety."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype, copy=False)


def softmax_backward(y, gy):
    dot = (y * gy).sum(axis=1, keepdims=True)
    return (y * (gy - dot)).astype(y.dtype, copy=False)


def gelu_forward(x):
    """Exact-erf GELU: x * Phi(x).  Returns (y, cdf); cdf feeds the backward."""
    cdf = (0.5 * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)
    return (x * cdf).astype(x.dtype, copy=False), cdf


def gelu_backward(x, cdf, gy):
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return (gy * (cdf + x * phi)).astype(x.dtype, copy=False)


def cross_entropy_forward(logits, labels):
    """Mean negative log softmax probability of the labels.

    Uses the log-sum-exp trick; returns (loss, probs) with probs reused by
    the backward pass.
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True)
    probs = (e / denom).astype(logits.dtype, copy=False)
    logp = shifted - np.log(denom)
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    return loss, probs


def cross_entropy_backward(probs, labels, gscale):
    g = probs.copy()
    n = probs.shape[0]
    g[np.arange(n), labels] -= 1.0
    g *= gscale
    return g


def sgd_update(param, grad, velocity, lr, momentum):
    """In-place momentum SGD: v <- momentum*v + g; p <- p - lr*v."""
    velocity *= momentum
    velocity += grad
    param -= lr * velocity
