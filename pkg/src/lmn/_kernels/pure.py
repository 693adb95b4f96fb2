"""NumPy implementations of the scoring / top-k kernels.

Selection semantics (largest first, ties broken by lowest flat index,
output sorted by descending score then ascending index) are shared with
the compiled twin in ``_core.pyx``; the dispatch layer in ``__init__``
picks one backend at import time.  Dot-product sums may differ from the
compiled backend in the last ulps, the selected indices never do.
"""

import numpy as np

from ..counters import score_madds
from ..errors import ContractError, ShapeError


def score_vec(keys: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Scores of one query against a key table: ``out[i] = keys[i] . q``."""
    keys = np.ascontiguousarray(keys, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    if keys.ndim != 2 or q.ndim != 1 or keys.shape[1] != q.shape[0]:
        raise ShapeError(f"score_vec: keys {keys.shape} vs query {q.shape}")
    score_madds.add(keys.shape[0] * keys.shape[1])
    return keys @ q


def combine_vec(s_row: np.ndarray, s_col: np.ndarray) -> np.ndarray:
    """Broadcast-add axis scores into the flat slot grid.

    ``out[i * m + j] = s_row[i] + s_col[j]`` for m = len(s_row).
    """
    s_row = np.ascontiguousarray(s_row, dtype=np.float64)
    s_col = np.ascontiguousarray(s_col, dtype=np.float64)
    if s_row.ndim != 1 or s_col.ndim != 1 or s_row.shape[0] != s_col.shape[0]:
        raise ShapeError(
            f"combine_vec: axis lengths differ ({s_row.shape} vs {s_col.shape})"
        )
    return (s_row[:, None] + s_col[None, :]).reshape(-1)


def topk_vec(s: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the k largest entries of a vector.

    Ties are broken by the lowest index; the output is sorted by
    descending value, then ascending index.
    """
    s = np.ascontiguousarray(s, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError(f"topk_vec: expected a vector, got shape {s.shape}")
    if not 1 <= k <= s.shape[0]:
        raise ContractError(f"topk_vec: k={k} out of range for n={s.shape[0]}")
    idx = np.argsort(-s, kind="stable")[:k].astype(np.int64)
    return idx, s[idx]


def topk_bcast_rows(
    s_row: np.ndarray, s_col: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise top-k over the implicit broadcast grid.

    For each row p the candidate scores are ``s_row[p, i] + s_col[p, j]``
    at flat index ``i * m + j``; returns (indices, values) of shape (P, k)
    under the same tie rule and ordering as ``topk_vec``.
    """
    s_row = np.ascontiguousarray(s_row, dtype=np.float64)
    s_col = np.ascontiguousarray(s_col, dtype=np.float64)
    if s_row.ndim != 2 or s_row.shape != s_col.shape:
        raise ShapeError(
            f"topk_bcast_rows: shapes {s_row.shape} vs {s_col.shape}"
        )
    p_rows, m = s_row.shape
    n = m * m
    if not 1 <= k <= n:
        raise ContractError(f"topk_bcast_rows: k={k} out of range for n={n}")
    s = (s_row[:, :, None] + s_col[:, None, :]).reshape(p_rows, n)
    if k == n:
        idx = np.argsort(-s, axis=1, kind="stable").astype(np.int64)
        return idx, np.take_along_axis(s, idx, axis=1)
    # kth largest value per row, then exact tie resolution by lowest index.
    thr = -np.partition(-s, k - 1, axis=1)[:, k - 1]
    gt = s > thr[:, None]
    need = k - gt.sum(axis=1)
    eq = s == thr[:, None]
    take_eq = eq & (np.cumsum(eq, axis=1) <= need[:, None])
    sel = gt | take_eq
    idx = np.nonzero(sel)[1].reshape(p_rows, k)  # ascending within each row
    vals = np.take_along_axis(s, idx, axis=1)
    order = np.lexsort((idx, -vals), axis=1)
    idx = np.take_along_axis(idx, order, axis=1).astype(np.int64)
    vals = np.take_along_axis(vals, order, axis=1)
    return idx, vals


def weighted_rows(w: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Weighted sum of row bundles: ``out[p] = sum_k w[p, k] * rows[p, k]``."""
    w = np.ascontiguousarray(w, dtype=np.float64)
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if w.ndim != 2 or rows.ndim != 3 or rows.shape[:2] != w.shape:
        raise ShapeError(f"weighted_rows: weights {w.shape} vs rows {rows.shape}")
    return np.einsum("pk,pkd->pd", w, rows)
