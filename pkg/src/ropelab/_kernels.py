"""Compiled inner loops for projections and logits.

Each output element is produced by exactly one thread with the pairwise
tree from :mod:`ropelab._reduce`, so results do not depend on the number
of threads. No fastmath: products and sums are individually rounded in the
dtype of the inputs, with no fused multiply-add.
"""

from __future__ import annotations

import numba
import numpy as np
from numba import njit, prange

# the installed TBB is too old and warns on first launch
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@njit(cache=True, inline="always")
def _tree_reduce(buf, n):
    while n > 1:
        half = n // 2
        for t in range(half):
            buf[t] = buf[2 * t] + buf[2 * t + 1]
        if n % 2:
            buf[half] = buf[n - 1]
            n = half + 1
        else:
            n = half
    return buf[0]


@njit(cache=True, parallel=True)
def project(x, w):
    """``out[t, r] = sum_c w[r, c] * x[t, c]`` in the dtype of ``x``."""
    rows, cols = x.shape
    out_dim = w.shape[0]
    out = np.empty((rows, out_dim), dtype=x.dtype)
    for t in prange(rows):
        buf = np.empty(cols, dtype=x.dtype)
        for r in range(out_dim):
            for c in range(cols):
                buf[c] = w[r, c] * x[t, c]
            out[t, r] = _tree_reduce(buf, cols)
    return out


@njit(cache=True, parallel=True)
def causal_logits(q, k):
    """Dense lower-triangular ``q_i . k_j`` (upper triangle left at 0)."""
    rows, d = q.shape
    out = np.zeros((rows, rows), dtype=np.float64)
    for i in prange(rows):
        buf = np.empty(d, dtype=q.dtype)
        for j in range(i + 1):
            for c in range(d):
                buf[c] = q[i, c] * k[j, c]
            out[i, j] = _tree_reduce(buf, d)
    return out


@njit(cache=True, parallel=True)
def interval_logits(q, k, row_ptr, lo, hi):
    """Logits only on the per-row column intervals of a block-sparse plan."""
    rows, d = q.shape
    out = np.zeros((rows, rows), dtype=np.float64)
    for i in prange(rows):
        buf = np.empty(d, dtype=q.dtype)
        for s in range(row_ptr[i], row_ptr[i + 1]):
            for j in range(lo[s], hi[s] + 1):
                for c in range(d):
                    buf[c] = q[i, c] * k[j, c]
                out[i, j] = _tree_reduce(buf, d)
    return out


@njit(cache=True, parallel=True)
def column_logits(q, key):
    """``q_i . key`` for every row ``i``."""
    rows, d = q.shape
    out = np.empty(rows, dtype=np.float64)
    for i in prange(rows):
        buf = np.empty(d, dtype=q.dtype)
        for c in range(d):
            buf[c] = q[i, c] * key[c]
        out[i] = _tree_reduce(buf, d)
    return out


def set_threads(n: int | None) -> int:
    """Bound kernel parallelism; returns the thread count actually used."""
    if n is None:
        return numba.get_num_threads()
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n
