# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Levenshtein kernels over integer token arrays."""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef Py_ssize_t _distance(const cnp.int64_t[:] a, const cnp.int64_t[:] b) nogil:
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0]
    cdef Py_ssize_t i, j, sub, best, diag
    cdef Py_ssize_t *row
    if n == 0:
        return m
    if m == 0:
        return n
    row = <Py_ssize_t *> malloc((m + 1) * sizeof(Py_ssize_t))
    for j in range(m + 1):
        row[j] = j
    for i in range(1, n + 1):
        diag = row[0]
        row[0] = i
        for j in range(1, m + 1):
            sub = diag + (a[i - 1] != b[j - 1])
            diag = row[j]
            best = row[j] + 1
            if row[j - 1] + 1 < best:
                best = row[j - 1] + 1
            if sub < best:
                best = sub
            row[j] = best
    best = row[m]
    free(row)
    return best


def edit_distance_ids(a, b):
    """Levenshtein distance between two int64 token-id arrays."""
    cdef const cnp.int64_t[:] av = np.ascontiguousarray(a, dtype=np.int64)
    cdef const cnp.int64_t[:] bv = np.ascontiguousarray(b, dtype=np.int64)
    return int(_distance(av, bv))


def edit_distances_ids(ref, hyps):
    """Distances from one reference to each hypothesis."""
    cdef const cnp.int64_t[:] rv = np.ascontiguousarray(ref, dtype=np.int64)
    cdef Py_ssize_t k, n = len(hyps)
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[:] ov = out
    cdef const cnp.int64_t[:] hv
    for k in range(n):
        hv = np.ascontiguousarray(hyps[k], dtype=np.int64)
        ov[k] = _distance(rv, hv)
    return out
