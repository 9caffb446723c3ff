# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled dynamic-programming kernels."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def dtw_accumulate(double[:, ::1] cost):
    """Minimum-sum monotone warping path through ``cost``; ties prefer longer paths.

    Returns (path_sum, path_length).
    """
    cdef Py_ssize_t n = cost.shape[0], m = cost.shape[1], i, j
    if n == 0 or m == 0:
        raise ValueError("empty cost matrix")
    cdef double[:, ::1] acc = np.empty((n, m), dtype=np.float64)
    cdef long[:, ::1] ln = np.empty((n, m), dtype=np.int64)
    cdef double best, cand
    cdef long blen, clen
    acc[0, 0] = cost[0, 0]
    ln[0, 0] = 1
    for j in range(1, m):
        acc[0, j] = acc[0, j - 1] + cost[0, j]
        ln[0, j] = ln[0, j - 1] + 1
    for i in range(1, n):
        acc[i, 0] = acc[i - 1, 0] + cost[i, 0]
        ln[i, 0] = ln[i - 1, 0] + 1
        for j in range(1, m):
            best = acc[i - 1, j - 1]
            blen = ln[i - 1, j - 1]
            cand = acc[i - 1, j]
            clen = ln[i - 1, j]
            if cand < best or (cand == best and clen > blen):
                best = cand
                blen = clen
            cand = acc[i, j - 1]
            clen = ln[i, j - 1]
            if cand < best or (cand == best and clen > blen):
                best = cand
                blen = clen
            acc[i, j] = best + cost[i, j]
            ln[i, j] = blen + 1
    return acc[n - 1, m - 1], int(ln[n - 1, m - 1])
