"""Fixed-order pairwise reductions.

Every sum in the package goes through the same tree: adjacent elements are
added pairwise, ``(x0+x1), (x2+x3), ...``, an odd trailing element is
carried up unchanged, and the step repeats until one value is left. The
order depends only on the length, never on threading or array layout.
"""

from __future__ import annotations

import numpy as np


def pairwise_sum(a, axis: int = -1) -> np.ndarray:
    """Tree-sum ``a`` along ``axis`` in its own dtype."""
    a = np.moveaxis(np.asarray(a), axis, -1)
    n = a.shape[-1]
    if n == 0:
        return np.zeros(a.shape[:-1], dtype=a.dtype)
    while n > 1:
        half = n // 2
        paired = a[..., 0 : 2 * half : 2] + a[..., 1 : 2 * half : 2]
        if n % 2:
            paired = np.concatenate([paired, a[..., n - 1 : n]], axis=-1)
        a = paired
        n = a.shape[-1]
    return a[..., 0]


def tree_sum_list(values: list):
    """Scalar twin of :func:`pairwise_sum` for plain Python sequences."""
    vals = list(values)
    if not vals:
        return 0.0
    while len(vals) > 1:
        nxt = [vals[t] + vals[t + 1] for t in range(0, len(vals) - 1, 2)]
        if len(vals) % 2:
            nxt.append(vals[-1])
        vals = nxt
    return vals[0]
