# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the scoring / top-k kernels in ``pure.py``.

Selection semantics (tie rule, output ordering) are identical with the
NumPy fallback; kernel tests run both backends against each other.  The
top-k maintains a small insertion-sorted best list, so one row costs
O(n + k * shifts) and never materialises the n-wide score grid.
"""

from libc.math cimport INFINITY

import numpy as np

cimport numpy as cnp

from lmn.counters import score_madds
from lmn.errors import ContractError, ShapeError

cnp.import_array()


def score_vec(keys, q):
    """Scores of one query against a key table: ``out[i] = keys[i] . q``."""
    cdef double[:, ::1] kv = np.ascontiguousarray(keys, dtype=np.float64)
    cdef double[::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    if kv.shape[1] != qv.shape[0]:
        raise ShapeError(
            f"score_vec: keys ({kv.shape[0]}, {kv.shape[1]}) vs query ({qv.shape[0]},)"
        )
    out = np.empty(kv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i, j, m = kv.shape[0], d = kv.shape[1]
    cdef double acc
    for i in range(m):
        acc = 0.0
        for j in range(d):
            acc += kv[i, j] * qv[j]
        ov[i] = acc
    score_madds.add(m * d)
    return out


def combine_vec(s_row, s_col):
    """Broadcast-add axis scores: ``out[i * m + j] = s_row[i] + s_col[j]``."""
    cdef double[::1] rv = np.ascontiguousarray(s_row, dtype=np.float64)
    cdef double[::1] cv = np.ascontiguousarray(s_col, dtype=np.float64)
    cdef Py_ssize_t m = rv.shape[0]
    if cv.shape[0] != m:
        raise ShapeError(
            f"combine_vec: axis lengths differ ({m} vs {cv.shape[0]})"
        )
    out = np.empty(m * m, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i, j
    cdef double base
    for i in range(m):
        base = rv[i]
        for j in range(m):
            ov[i * m + j] = base + cv[j]
    return out


cdef inline void _insert(double* best_v, long long* best_i,
                         Py_ssize_t k, double v, long long f) noexcept nogil:
    # Strict comparison keeps earlier (lower) indices on ties, and the
    # insertion point keeps equal values in arrival order.
    cdef Py_ssize_t pos
    if v > best_v[k - 1]:
        pos = k - 1
        while pos > 0 and v > best_v[pos - 1]:
            best_v[pos] = best_v[pos - 1]
            best_i[pos] = best_i[pos - 1]
            pos -= 1
        best_v[pos] = v
        best_i[pos] = f


def topk_vec(s, Py_ssize_t k):
    """Indices and values of the k largest entries of a vector.

    Ties broken by lowest index; output sorted by descending value then
    ascending index.
    """
    cdef double[::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef Py_ssize_t n = sv.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"topk_vec: k={k} out of range for n={n}")
    idx = np.empty(k, dtype=np.int64)
    vals = np.full(k, -INFINITY, dtype=np.float64)
    cdef long long[::1] iv = idx
    cdef double[::1] vv = vals
    cdef Py_ssize_t f
    for f in range(k):
        iv[f] = -1
    for f in range(n):
        _insert(&vv[0], &iv[0], k, sv[f], f)
    return idx, vals


def topk_bcast_rows(s_row, s_col, Py_ssize_t k):
    """Row-wise top-k over the implicit broadcast grid.

    Candidate scores are ``s_row[p, i] + s_col[p, j]`` at flat index
    ``i * m + j``; never materialises the (P, m*m) grid.
    """
    cdef double[:, ::1] rv = np.ascontiguousarray(s_row, dtype=np.float64)
    cdef double[:, ::1] cv = np.ascontiguousarray(s_col, dtype=np.float64)
    cdef Py_ssize_t p_rows = rv.shape[0], m = rv.shape[1]
    if cv.shape[0] != p_rows or cv.shape[1] != m:
        raise ShapeError(
            f"topk_bcast_rows: shapes ({rv.shape[0]}, {rv.shape[1]}) vs "
            f"({cv.shape[0]}, {cv.shape[1]})"
        )
    cdef Py_ssize_t n = m * m
    if not 1 <= k <= n:
        raise ContractError(f"topk_bcast_rows: k={k} out of range for n={n}")
    idx = np.empty((p_rows, k), dtype=np.int64)
    vals = np.empty((p_rows, k), dtype=np.float64)
    cdef long long[:, ::1] iv = idx
    cdef double[:, ::1] vv = vals
    cdef Py_ssize_t p, i, j, q
    cdef long long f
    cdef double base
    with nogil:
        for p in range(p_rows):
            for q in range(k):
                vv[p, q] = -INFINITY
                iv[p, q] = -1
            f = 0
            for i in range(m):
                base = rv[p, i]
                for j in range(m):
                    _insert(&vv[p, 0], &iv[p, 0], k, base + cv[p, j], f)
                    f += 1
    return idx, vals


def weighted_rows(w, rows):
    """Weighted sum of row bundles: ``out[p] = sum_k w[p, k] * rows[p, k]``."""
    cdef double[:, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[:, :, ::1] xv = np.ascontiguousarray(rows, dtype=np.float64)
    cdef Py_ssize_t p_rows = wv.shape[0], k = wv.shape[1]
    if xv.shape[0] != p_rows or xv.shape[1] != k:
        raise ShapeError(
            f"weighted_rows: weights ({wv.shape[0]}, {wv.shape[1]}) vs rows "
            f"({xv.shape[0]}, {xv.shape[1]}, {xv.shape[2]})"
        )
    cdef Py_ssize_t d = xv.shape[2]
    out = np.zeros((p_rows, d), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t p, q, c
    cdef double wq
    with nogil:
        for p in range(p_rows):
            for q in range(k):
                wq = wv[p, q]
                for c in range(d):
                    ov[p, c] += wq * xv[p, q, c]
    return out
