# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core.

Drop-in twin of ``_numpy``: same function names, same shapes, same
semantics, with the row loops fused into single C passes.  Accumulations
run in double regardless of the storage dtype.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, log, sqrt

cnp.import_array()

NAME = "compiled"

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327

ctypedef fused real:
    float
    double


def layer_norm_forward(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    mean_arr = np.empty(n, dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[::1] mean = mean_arr
    cdef real[::1] rstd = rstd_arr
    cdef Py_ssize_t i, j
    cdef double acc, var, diff, m, r
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += x[i, j]
            m = acc / d
            var = 0.0
            for j in range(d):
                diff = x[i, j] - m
                var += diff * diff
            var /= d
            r = 1.0 / sqrt(var + eps)
            mean[i] = <real> m
            rstd[i] = <real> r
            for j in range(d):
                y[i, j] = <real> (((x[i, j] - m) * r) * gamma[j] + beta[j])
    return y_arr, mean_arr, rstd_arr


def layer_norm_backward(real[:, ::1] gy, real[:, ::1] x, real[::1] mean,
                        real[::1] rstd, real[::1] gamma):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((n, d), dtype=dtype)
    ggamma_acc = np.zeros(d, dtype=np.float64)
    gbeta_acc = np.zeros(d, dtype=np.float64)
    cdef real[:, ::1] gx = gx_arr
    cdef double[::1] ggamma = ggamma_acc
    cdef double[::1] gbeta = gbeta_acc
    cdef Py_ssize_t i, j
    cdef double m1, m2, xhat, gxhat, m, r
    with nogil:
        for i in range(n):
            m = mean[i]
            r = rstd[i]
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                xhat = (x[i, j] - m) * r
                gxhat = gy[i, j] * gamma[j]
                m1 += gxhat
                m2 += gxhat * xhat
                ggamma[j] += gy[i, j] * xhat
                gbeta[j] += gy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                xhat = (x[i, j] - m) * r
                gxhat = gy[i, j] * gamma[j]
                gx[i, j] = <real> ((gxhat - m1 - xhat * m2) * r)
    return gx_arr, ggamma_acc.astype(dtype), gbeta_acc.astype(dtype)


def softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef Py_ssize_t i, j
    cdef double mx, denom, e
    with nogil:
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, d):
                if x[i, j] > mx:
                    mx = x[i, j]
            denom = 0.0
            for j in range(d):
                e = exp(x[i, j] - mx)
                y[i, j] = <real> e
                denom += e
            for j in range(d):
                y[i, j] = <real> (y[i, j] / denom)
    return y_arr


def softmax_backward(real[:, ::1] y, real[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] gx = gx_arr
    cdef Py_ssize_t i, j
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += y[i, j] * gy[i, j]
            for j in range(d):
                gx[i, j] = <real> (y[i, j] * (gy[i, j] - dot))
    return gx_arr


def gelu_forward(real[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty(n, dtype=dtype)
    cdf_arr = np.empty(n, dtype=dtype)
    cdef real[::1] y = y_arr
    cdef real[::1] cdf = cdf_arr
    cdef Py_ssize_t i
    cdef double v, c
    with nogil:
        for i in range(n):
            v = x[i]
            c = 0.5 * (1.0 + erf(v * INV_SQRT2))
            cdf[i] = <real> c
            y[i] = <real> (v * c)
    return y_arr, cdf_arr


def gelu_backward(real[::1] x, real[::1] cdf, real[::1] gy):
    cdef Py_ssize_t n = x.shape[0]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty(n, dtype=dtype)
    cdef real[::1] gx = gx_arr
    cdef Py_ssize_t i
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            gx[i] = <real> (gy[i] * (cdf[i] + v * exp(-0.5 * v * v) * INV_SQRT_2PI))
    return gx_arr


def cross_entropy_forward(real[:, ::1] logits, cnp.int64_t[::1] labels):
    cdef Py_ssize_t n = logits.shape[0], d = logits.shape[1]
    dtype = np.float32 if real is float else np.float64
    probs_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] probs = probs_arr
    cdef Py_ssize_t i, j
    cdef double mx, denom, e, loss = 0.0
    with nogil:
        for i in range(n):
            mx = logits[i, 0]
            for j in range(1, d):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            denom = 0.0
            for j in range(d):
                e = exp(logits[i, j] - mx)
                probs[i, j] = <real> e
                denom += e
            for j in range(d):
                probs[i, j] = <real> (probs[i, j] / denom)
            loss -= (logits[i, labels[i]] - mx) - log(denom)
    return loss / n, probs_arr


def cross_entropy_backward(real[:, ::1] probs, cnp.int64_t[::1] labels, double gscale):
    cdef Py_ssize_t n = probs.shape[0], d = probs.shape[1]
    dtype = np.float32 if real is float else np.float64
    g_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] g = g_arr
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(d):
                g[i, j] = <real> (probs[i, j] * gscale)
            g[i, labels[i]] -= <real> gscale
    return g_arr


def sgd_update(real[::1] param, real[::1] grad, real[::1] velocity, double lr, double momentum):
    cdef Py_ssize_t n = param.shape[0]
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            velocity[i] = <real> (momentum * velocity[i] + grad[i])
            param[i] -= <real> (lr * velocity[i])
