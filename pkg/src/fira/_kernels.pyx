# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: Jacobi orthogonalization sweeps and the fused
Adam moment update.  Mirrors ``fira._kernels_py`` exactly; that module
is the reference for semantics."""

import numpy as np

from libc.math cimport fabs, sqrt

COMPILED = True


def jacobi_sweeps(double[:, ::1] a, double[:, ::1] v, double tol, int max_sweeps):
    """Orthogonalize the columns of ``a`` in place with Jacobi rotations.

    Rotations are accumulated into ``v`` (passed in as identity).
    Returns (sweeps_used, max_correlation_of_last_sweep).
    """
    cdef Py_ssize_t p = a.shape[0]
    cdef Py_ssize_t q = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef int sweep
    cdef double aii, ajj, aij, off, zeta, t, cs, sn, x, y, max_off

    max_off = 0.0
    for sweep in range(1, max_sweeps + 1):
        max_off = 0.0
        for i in range(q - 1):
            for j in range(i + 1, q):
                aii = 0.0
                ajj = 0.0
                aij = 0.0
                for k in range(p):
                    x = a[k, i]
                    y = a[k, j]
                    aii += x * x
                    ajj += y * y
                    aij += x * y
                if aii == 0.0 or ajj == 0.0:
                    continue
                off = fabs(aij) / sqrt(aii * ajj)
                if off > max_off:
                    max_off = off
                if off <= tol:
                    continue
                zeta = (ajj - aii) / (2.0 * aij)
                # sign(0) taken as +1 so equal-norm columns still rotate
                if zeta >= 0.0:
                    t = 1.0 / (fabs(zeta) + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (fabs(zeta) + sqrt(1.0 + zeta * zeta))
                cs = 1.0 / sqrt(1.0 + t * t)
                sn = cs * t
                for k in range(p):
                    x = a[k, i]
                    y = a[k, j]
                    a[k, i] = cs * x - sn * y
                    a[k, j] = sn * x + cs * y
                for k in range(q):
                    x = v[k, i]
                    y = v[k, j]
                    v[k, i] = cs * x - sn * y
                    v[k, j] = sn * x + cs * y
        if max_off <= tol:
            return sweep, max_off
    return max_sweeps, max_off


def adam_update(double[:, ::1] m, double[:, ::1] v, double[:, ::1] g,
                double beta1, double beta2, double eps, long step):
    """Fused Adam moment update, in place on ``m`` and ``v``.

    Returns the bias-corrected update direction as a new array.
    """
    cdef Py_ssize_t rows = g.shape[0]
    cdef Py_ssize_t cols = g.shape[1]
    cdef Py_ssize_t i, j
    cdef double correction = sqrt(1.0 - beta2**step) / (1.0 - beta1**step)
    out_arr = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(rows):
        for j in range(cols):
            m[i, j] = beta1 * m[i, j] + (1.0 - beta1) * g[i, j]
            v[i, j] = beta2 * v[i, j] + (1.0 - beta2) * (g[i, j] * g[i, j])
            out[i, j] = correction * (m[i, j] / (sqrt(v[i, j]) + eps))
    return out_arr
