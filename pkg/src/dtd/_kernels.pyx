# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled scoring kernels; same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, M_PI

cnp.import_array()

cdef double EULER_GAMMA = 0.5772156649015329
cdef double KDE_FLOOR = 1e-8


cdef inline double _sqdist(const double[:, ::1] X, Py_ssize_t i,
                           const double[:, ::1] B, Py_ssize_t j, Py_ssize_t d) noexcept nogil:
    cdef double acc = 0.0, diff
    cdef Py_ssize_t t
    for t in range(d):
        diff = X[i, t] - B[j, t]
        acc += diff * diff
    return acc


def sq_dists(X, B):
    cdef const double[:, ::1] xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(B, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], m = bv.shape[0], d = xv.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] ov = out
    with nogil:
        for i in range(n):
            for j in range(m):
                ov[i, j] = _sqdist(xv, i, bv, j, d)
    return out


def kde_scores(X, B, double h):
    cdef const double[:, ::1] xv = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(np.atleast_2d(B), dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], m = bv.shape[0], d = bv.shape[1], i, j
    cdef double inv = 1.0 / (2.0 * h * h)
    cdef double log_norm = -0.5 * d * log(2.0 * M_PI * h * h) - log(<double>m)
    cdef double log_floor = log(KDE_FLOOR)
    cdef double top, acc, lse, a, hi, lo
    out = np.empty(n)
    cdef double[::1] ov = out
    cdef double[::1] buf = np.empty(m)
    with nogil:
        for i in range(n):
            top = -1e308
            for j in range(m):
                a = -_sqdist(xv, i, bv, j, d) * inv
                buf[j] = a
                if a > top:
                    top = a
            acc = 0.0
            for j in range(m):
                acc += exp(buf[j] - top)
            lse = top + log(acc) + log_norm
            if lse > log_floor:
                hi, lo = lse, log_floor
            else:
                hi, lo = log_floor, lse
            ov[i] = -(hi + log1p(exp(lo - hi)))
    return out


def knn_scores(X, B, int k):
    cdef const double[:, ::1] xv = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(np.atleast_2d(B), dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], m = bv.shape[0], d = bv.shape[1], i, j, t, pos
    cdef double dist, acc
    out = np.empty(n)
    cdef double[::1] ov = out
    cdef double[::1] best = np.empty(k)
    with nogil:
        for i in range(n):
            # sorted insertion into the k smallest squared distances
            for t in range(k):
                best[t] = 1e308
            for j in range(m):
                dist = _sqdist(xv, i, bv, j, d)
                if dist < best[k - 1]:
                    pos = k - 1
                    while pos > 0 and best[pos - 1] > dist:
                        best[pos] = best[pos - 1]
                        pos -= 1
                    best[pos] = dist
            acc = 0.0
            for t in range(k):
                acc += sqrt(best[t])
            ov[i] = acc / k
    return out


cdef inline double _credit(double n) noexcept nogil:
    if n <= 1.0:
        return 0.0
    if n == 2.0:
        return 1.0
    return 2.0 * (log(n - 1.0) + EULER_GAMMA) - 2.0 * (n - 1.0) / n


def iforest_path_lengths(X, feature, threshold, left, right, size, roots):
    cdef const double[:, ::1] xv = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    cdef const long long[::1] fv = np.ascontiguousarray(feature, dtype=np.int64)
    cdef const double[::1] tv = np.ascontiguousarray(threshold, dtype=np.float64)
    cdef const long long[::1] lv = np.ascontiguousarray(left, dtype=np.int64)
    cdef const long long[::1] rv = np.ascontiguousarray(right, dtype=np.int64)
    cdef const long long[::1] sv = np.ascontiguousarray(size, dtype=np.int64)
    cdef const long long[::1] root_v = np.ascontiguousarray(roots, dtype=np.int64)
    cdef Py_ssize_t n = xv.shape[0], n_trees = root_v.shape[0], i, t
    cdef long long node
    cdef double depth, total
    out = np.empty(n)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            total = 0.0
            for t in range(n_trees):
                node = root_v[t]
                depth = 0.0
                while lv[node] >= 0:
                    if xv[i, fv[node]] < tv[node]:
                        node = lv[node]
                    else:
                        node = rv[node]
                    depth += 1.0
                total += depth + _credit(<double>sv[node])
            ov[i] = total / n_trees
    return out
