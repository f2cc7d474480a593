# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled Gaussian-kernel sums used by the MMD loss."""
import numpy as np

from libc.math cimport exp


def gaussian_kernel_sum(A, B, double gamma, bint exclude_diag=False,
                        bint grad_a=False, bint grad_b=False):
    """Sum of exp(-gamma * |a_i - b_j|^2) over all (i, j), optionally i != j.

    Returns ``(s, dA, dB)`` where ``dA``/``dB`` are the gradients of ``s``
    (or ``None`` when not requested).
    """
    cdef double[:, ::1] a = np.ascontiguousarray(A, dtype=np.float64)
    bt_arr = np.ascontiguousarray(np.asarray(B, dtype=np.float64).T)
    cdef double[:, ::1] bt = bt_arr
    cdef Py_ssize_t n = a.shape[0], m = bt.shape[1], d = a.shape[1], i, j, k
    if bt.shape[0] != d:
        raise ValueError("A and B must have the same number of columns")
    if exclude_diag and n != m:
        raise ValueError("exclude_diag needs A and B with equal row counts")

    da_arr = np.zeros((n, d)) if grad_a else np.zeros((0, 0))
    dbt_arr = np.zeros((d, m)) if grad_b else np.zeros((0, 0))
    row_arr = np.empty(m)
    cdef double[:, ::1] da = da_arr
    cdef double[:, ::1] dbt = dbt_arr
    cdef double[::1] row = row_arr
    cdef double total = 0.0, rs, ai, diff, acc, scale = -2.0 * gamma, w

    for i in range(n):
        for j in range(m):
            row[j] = 0.0
        for k in range(d):
            ai = a[i, k]
            for j in range(m):
                diff = ai - bt[k, j]
                row[j] += diff * diff
        for j in range(m):
            row[j] = exp(-gamma * row[j])
        if exclude_diag:
            row[i] = 0.0
        rs = 0.0
        for j in range(m):
            rs += row[j]
        total += rs
        if grad_b:
            w = -scale
            for k in range(d):
                ai = a[i, k]
                acc = 0.0
                for j in range(m):
                    acc += row[j] * bt[k, j]
                    dbt[k, j] += w * row[j] * (ai - bt[k, j])
                if grad_a:
                    da[i, k] = scale * (ai * rs - acc)
        elif grad_a:
            for k in range(d):
                acc = 0.0
                for j in range(m):
                    acc += row[j] * bt[k, j]
                da[i, k] = scale * (a[i, k] * rs - acc)

    return (
        total,
        da_arr if grad_a else None,
        np.ascontiguousarray(dbt_arr.T) if grad_b else None,
    )
