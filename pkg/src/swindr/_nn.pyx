# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled elementwise and row kernels for the tensor engine.

Built with vectorized libm; ``_fallback.py`` holds the numpy equivalents.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport erf, erff, exp, expf, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double SQRT1_2 = 0.70710678118654752440
cdef double INV_SQRT_2PI = 0.39894228040143267794


def gelu_fwd(x):
    """Return ``(x * Phi(x), d/dx)`` in one pass."""
    a = np.ascontiguousarray(x)
    y = np.empty_like(a)
    d = np.empty_like(a)
    if a.dtype == np.float32:
        _gelu_f(a.reshape(-1), y.reshape(-1), d.reshape(-1))
    else:
        _gelu_d(a.reshape(-1), y.reshape(-1), d.reshape(-1))
    return y, d


cdef void _gelu_f(const float[::1] x, float[::1] y, float[::1] d) noexcept nogil:
    cdef Py_ssize_t i
    cdef float v, c
    cdef float half = 0.5, one = 1.0, neg_half = -0.5
    cdef float s = <float>SQRT1_2, k = <float>INV_SQRT_2PI
    for i in range(x.shape[0]):
        v = x[i]
        c = half * (one + erff(v * s))
        y[i] = v * c
        d[i] = c + v * k * expf(neg_half * v * v)


cdef void _gelu_d(const double[::1] x, double[::1] y, double[::1] d) noexcept nogil:
    cdef Py_ssize_t i
    cdef double v, c
    for i in range(x.shape[0]):
        v = x[i]
        c = 0.5 * (1.0 + erf(v * SQRT1_2))
        y[i] = v * c
        d[i] = c + v * INV_SQRT_2PI * exp(-0.5 * v * v)


def layer_norm_fwd(x, gamma, beta, double eps):
    """Rows of a 2-d array; returns ``(y, xhat, rstd)``."""
    a = np.ascontiguousarray(x)
    g = np.ascontiguousarray(gamma, dtype=a.dtype)
    b = np.ascontiguousarray(beta, dtype=a.dtype)
    y = np.empty_like(a)
    xhat = np.empty_like(a)
    rstd = np.empty(a.shape[0], dtype=a.dtype)
    if a.dtype == np.float32:
        _ln_fwd[float](a, g, b, eps, y, xhat, rstd)
    else:
        _ln_fwd[double](a, g, b, eps, y, xhat, rstd)
    return y, xhat, rstd


cdef void _ln_fwd(const real[:, ::1] x, const real[::1] g, const real[::1] b, double eps,
                  real[:, ::1] y, real[:, ::1] xhat, real[::1] rstd) noexcept nogil:
    cdef Py_ssize_t i, j, n = x.shape[0], C = x.shape[1]
    cdef double mu, var, r, t
    for i in range(n):
        mu = 0.0
        for j in range(C):
            mu += x[i, j]
        mu /= C
        var = 0.0
        for j in range(C):
            t = x[i, j] - mu
            var += t * t
        var /= C
        r = 1.0 / sqrt(var + eps)
        rstd[i] = <real>r
        for j in range(C):
            t = (x[i, j] - mu) * r
            xhat[i, j] = <real>t
            y[i, j] = <real>(t * g[j] + b[j])


def layer_norm_bwd(grad, xhat, rstd, gamma):
    gr = np.ascontiguousarray(grad)
    xh = np.ascontiguousarray(xhat, dtype=gr.dtype)
    rs = np.ascontiguousarray(rstd, dtype=gr.dtype)
    gm = np.ascontiguousarray(gamma, dtype=gr.dtype)
    dx = np.empty_like(gr)
    dg = np.zeros(gr.shape[1], dtype=np.float64)
    db = np.zeros(gr.shape[1], dtype=np.float64)
    if gr.dtype == np.float32:
        _ln_bwd[float](gr, xh, rs, gm, dx, dg, db)
    else:
        _ln_bwd[double](gr, xh, rs, gm, dx, dg, db)
    return dx, dg.astype(gr.dtype), db.astype(gr.dtype)


cdef void _ln_bwd(const real[:, ::1] g, const real[:, ::1] xhat, const real[::1] rstd, const real[::1] gamma,
                  real[:, ::1] dx, double[::1] dg, double[::1] db) noexcept nogil:
    cdef Py_ssize_t i, j, n = g.shape[0], C = g.shape[1]
    cdef double m1, m2, dxh
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(C):
            dxh = g[i, j] * gamma[j]
            m1 += dxh
            m2 += dxh * xhat[i, j]
            dg[j] += g[i, j] * xhat[i, j]
            db[j] += g[i, j]
        m1 /= C
        m2 /= C
        for j in range(C):
            dxh = g[i, j] * gamma[j]
            dx[i, j] = <real>(rstd[i] * (dxh - m1 - xhat[i, j] * m2))


def softmax_fwd(x):
    """Row softmax of a 2-d array."""
    a = np.ascontiguousarray(x)
    y = np.empty_like(a)
    if a.dtype == np.float32:
        _sm_fwd[float](a, y)
    else:
        _sm_fwd[double](a, y)
    return y


cdef void _sm_fwd(const real[:, ::1] x, real[:, ::1] y) noexcept nogil:
    cdef Py_ssize_t i, j, n = x.shape[0], K = x.shape[1]
    cdef double m, s, e
    for i in range(n):
        m = x[i, 0]
        for j in range(1, K):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(K):
            e = exp(x[i, j] - m)
            y[i, j] = <real>e
            s += e
        for j in range(K):
            y[i, j] = <real>(y[i, j] / s)


def softmax_bwd(grad, y):
    gr = np.ascontiguousarray(grad)
    yy = np.ascontiguousarray(y, dtype=gr.dtype)
    dx = np.empty_like(gr)
    if gr.dtype == np.float32:
        _sm_bwd[float](gr, yy, dx)
    else:
        _sm_bwd[double](gr, yy, dx)
    return dx


cdef void _sm_bwd(const real[:, ::1] g, const real[:, ::1] y, real[:, ::1] dx) noexcept nogil:
    cdef Py_ssize_t i, j, n = g.shape[0], K = g.shape[1]
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(K):
            s += g[i, j] * y[i, j]
        for j in range(K):
            dx[i, j] = <real>(y[i, j] * (g[i, j] - s))
