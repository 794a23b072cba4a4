# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled elementwise and row-reduction kernels.

All functions take C-contiguous float64 buffers. Row kernels treat the input
as a (rows, cols) matrix; the Python wrapper in ``misa.kernels`` handles
reshaping.
"""
from libc.math cimport exp, log, log1p, fabs, fmin, fmax, tanh, INFINITY, isinf

import numpy as np


def elu_forward(const double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    # branch-free so the loop vectorises against libmvec
    for i in range(n):
        o[i] = fmax(x[i], 0.0) + exp(fmin(x[i], 0.0)) - 1.0
    return out


def elu_backward(const double[::1] x, const double[::1] g):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = g[i] * exp(fmin(x[i], 0.0))
    return out


def logsumexp_rows(const double[:, ::1] x):
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    out = np.empty(rows, dtype=np.float64)
    cdef double[::1] o = out
    cdef double m, s
    for r in range(rows):
        m = -INFINITY
        for c in range(cols):
            if x[r, c] > m:
                m = x[r, c]
        if isinf(m):
            o[r] = m
            continue
        s = 0.0
        for c in range(cols):
            s += exp(x[r, c] - m)
        o[r] = m + log(s)
    return out


def softmax_rows(const double[:, ::1] x, const double[::1] lse):
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    out = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double l
    for r in range(rows):
        l = lse[r]
        for c in range(cols):
            o[r, c] = exp(x[r, c] - l)
    return out


def squash_logdet(const double[::1] u):
    # log(1 - tanh(u)^2) = 2 * (log 2 - |u| - log1p(exp(-2|u|)))
    cdef Py_ssize_t i, n = u.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double au
    cdef double log2 = 0.6931471805599453
    for i in range(n):
        au = fabs(u[i])
        o[i] = 2.0 * (log2 - au - log1p(exp(-2.0 * au)))
    return out


def squash_logdet_backward(const double[::1] u, const double[::1] g):
    cdef Py_ssize_t i, n = u.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double e, t
    for i in range(n):
        # tanh through exp: the scalar libm tanh is much slower here
        e = exp(-2.0 * fabs(u[i]))
        t = (1.0 - e) / (1.0 + e)
        o[i] = -2.0 * (t if u[i] >= 0.0 else -t) * g[i]
    return out
