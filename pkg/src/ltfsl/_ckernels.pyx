# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels in ``_pykernels``.

Each function takes C-contiguous float64 arrays and returns freshly
allocated numpy arrays, matching the numpy fallback's signatures.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, expm1, pow, sqrt

cnp.import_array()


cdef inline double _row_lse(const double[:, ::1] z, Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t j, c = z.shape[1]
    cdef double m = z[i, 0], s = 0.0
    for j in range(1, c):
        if z[i, j] > m:
            m = z[i, j]
    for j in range(c):
        s += exp(z[i, j] - m)
    return m + log(s)


cdef inline double _row_softmax(const double[:, ::1] z, Py_ssize_t i, double[:, ::1] out) noexcept nogil:
    """Writes softmax(z[i]) into out[i]; returns logsumexp(z[i])."""
    cdef Py_ssize_t j, c = z.shape[1]
    cdef double m = z[i, 0], s = 0.0, e
    for j in range(1, c):
        if z[i, j] > m:
            m = z[i, j]
    for j in range(c):
        e = exp(z[i, j] - m)
        out[i, j] = e
        s += e
    for j in range(c):
        out[i, j] /= s
    return m + log(s)


def logsumexp_rows(z):
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t i, n = zv.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            ov[i] = _row_lse(zv, i)
    return out


def log_softmax_rows(z):
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t i, j, n = zv.shape[0], c = zv.shape[1]
    cdef double lse
    out = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] ov = out
    with nogil:
        for i in range(n):
            lse = _row_lse(zv, i)
            for j in range(c):
                ov[i, j] = zv[i, j] - lse
    return out


def softmax_xent(z, y, alpha):
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef const cnp.intp_t[::1] yv = np.ascontiguousarray(y, dtype=np.intp)
    cdef const double[::1] av = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef Py_ssize_t i, j, n = zv.shape[0], c = zv.shape[1]
    cdef cnp.intp_t t
    cdef double lse, a
    losses = np.empty(n, dtype=np.float64)
    dz = np.empty((n, c), dtype=np.float64)
    cdef double[::1] lv = losses
    cdef double[:, ::1] dv = dz
    with nogil:
        for i in range(n):
            t = yv[i]
            a = av[t]
            lse = _row_softmax(zv, i, dv)
            lv[i] = -a * (zv[i, t] - lse)
            dv[i, t] -= 1.0
            for j in range(c):
                dv[i, j] *= a
    return losses, dz


def focal_xent(z, y, alpha, double gamma):
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef const cnp.intp_t[::1] yv = np.ascontiguousarray(y, dtype=np.intp)
    cdef const double[::1] av = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef Py_ssize_t i, j, n = zv.shape[0], c = zv.shape[1]
    cdef cnp.intp_t t
    cdef double lse, a, lp, pt, om, mod, dmod, factor
    losses = np.empty(n, dtype=np.float64)
    dz = np.empty((n, c), dtype=np.float64)
    cdef double[::1] lv = losses
    cdef double[:, ::1] dv = dz
    with nogil:
        for i in range(n):
            t = yv[i]
            a = av[t]
            lse = _row_softmax(zv, i, dv)
            lp = zv[i, t] - lse
            pt = exp(lp)
            om = -expm1(lp)
            mod = pow(om, gamma)
            lv[i] = -a * mod * lp
            if om > 0.0:
                dmod = gamma * pow(om, gamma - 1.0) * pt * lp
            else:
                dmod = 0.0
            factor = a * (dmod - mod)
            for j in range(c):
                dv[i, j] = -dv[i, j]
            dv[i, t] += 1.0
            for j in range(c):
                dv[i, j] *= factor
    return losses, dz


def sq_euclidean_matrix(a, b):
    cdef const double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t i, j, k, n = av.shape[0], m = bv.shape[0], d = av.shape[1]
    cdef double s, diff
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    with nogil:
        for i in range(n):
            for j in range(m):
                s = 0.0
                for k in range(d):
                    diff = av[i, k] - bv[j, k]
                    s += diff * diff
                ov[i, j] = s
    return out


def cosine_matrix(a, b):
    cdef const double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t i, j, k, n = av.shape[0], m = bv.shape[0], d = av.shape[1]
    cdef double s, denom, r
    na = np.empty(n, dtype=np.float64)
    nb = np.empty(m, dtype=np.float64)
    cdef double[::1] nav = na
    cdef double[::1] nbv = nb
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    with nogil:
        for i in range(n):
            s = 0.0
            for k in range(d):
                s += av[i, k] * av[i, k]
            nav[i] = sqrt(s)
        for j in range(m):
            s = 0.0
            for k in range(d):
                s += bv[j, k] * bv[j, k]
            nbv[j] = sqrt(s)
        for i in range(n):
            for j in range(m):
                denom = nav[i] * nbv[j]
                if denom > 0.0:
                    s = 0.0
                    for k in range(d):
                        s += av[i, k] * bv[j, k]
                    r = s / denom
                    if r > 1.0:
                        r = 1.0
                    elif r < -1.0:
                        r = -1.0
                    ov[i, j] = r
                else:
                    ov[i, j] = 0.0
    return out
