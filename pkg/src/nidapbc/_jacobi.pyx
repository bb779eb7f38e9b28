# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Batched cyclic Jacobi eigensolver for small symmetric matrices."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, hypot, sqrt

cnp.import_array()


cdef void _eigh_one(double[:, ::1] a, double[:, ::1] v, double tol, int max_sweeps) noexcept nogil:
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i, j, k, p, q
    cdef double off, total, apq, tau, t, c, s, akp, akq, vkp, vkq, app, aqq
    for i in range(n):
        for j in range(n):
            v[i, j] = 1.0 if i == j else 0.0
    for k in range(max_sweeps):
        off = 0.0
        total = 0.0
        for i in range(n):
            for j in range(n):
                total += a[i, j] * a[i, j]
                if i != j:
                    off += a[i, j] * a[i, j]
        if off <= tol * tol * total or off == 0.0:
            return
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                tau = (aqq - app) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + hypot(1.0, tau))
                else:
                    t = -1.0 / (-tau + hypot(1.0, tau))
                c = 1.0 / sqrt(1.0 + t * t)
                s = t * c
                for i in range(n):
                    akp = a[i, p]
                    akq = a[i, q]
                    a[i, p] = c * akp - s * akq
                    a[i, q] = s * akp + c * akq
                for i in range(n):
                    akp = a[p, i]
                    akq = a[q, i]
                    a[p, i] = c * akp - s * akq
                    a[q, i] = s * akp + c * akq
                for i in range(n):
                    vkp = v[i, p]
                    vkq = v[i, q]
                    v[i, p] = c * vkp - s * vkq
                    v[i, q] = s * vkp + c * vkq


def jacobi_eigh(A, double tol=1e-12, int max_sweeps=64):
    """Eigen-decompose a stack of symmetric matrices ``(B, n, n)``.

    Returns ascending eigenvalues ``(B, n)`` and eigenvectors as columns
    ``(B, n, n)``.
    """
    cdef double[:, :, ::1] a = np.array(A, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t B = a.shape[0]
    cdef Py_ssize_t n = a.shape[1]
    V_arr = np.empty((B, n, n), dtype=np.float64)
    cdef double[:, :, ::1] v = V_arr
    cdef Py_ssize_t b
    with nogil:
        for b in range(B):
            _eigh_one(a[b], v[b], tol, max_sweeps)
    w = np.diagonal(np.asarray(a), axis1=1, axis2=2).copy()
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    V_arr = np.take_along_axis(V_arr, order[:, None, :], axis=2)
    return w, V_arr
