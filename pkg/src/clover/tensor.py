"""Dense-tensor substrate: deterministic matmul and masked row softmax.

Arrays are plain float64 ndarrays (see ``validation.as_tensor``). The
matrix product below accumulates in a fixed loop nest -- ascending inner
index, one multiply and one add per term -- so its output is
bit-identical to a naive triple loop and reproducible run to run.
"""

import numpy as np

from .exceptions import MaskError, ShapeError
from .validation import as_tensor

__all__ = ["matmul", "softmax_rows"]


def matmul(a, b):
    """Matrix product with deterministic, triple-loop-equivalent accumulation.

    Accepts (m, k) and (k, n) operands; rejects anything else with both
    shapes reported.
    """
    a = as_tensor(a, "a", ndim=2, allow_empty=True)
    b = as_tensor(b, "b", ndim=2, allow_empty=True)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def softmax_rows(logits, mask=None):
    """Row softmax over the last axis with max-subtraction for stability.

    ``logits`` has shape (..., n, n) with (query, key) as the trailing
    axes. Masked key positions come out exactly 0; each row sums to 1
    over its allowed positions. A row with no allowed position is an
    error naming the row.
    """
    x = as_tensor(logits, "logits")
    if x.ndim < 2:
        raise ShapeError(f"softmax_rows: need at least 2 dimensions, got shape {x.shape}")
    n_q, n_k = x.shape[-2], x.shape[-1]
    allowed = None
    if mask is not None and mask.kind != "none":
        if n_q != n_k:
            raise ShapeError(f"softmax_rows: masks require square logits, got {x.shape}")
        allowed = mask.allowed(n_q)
        empty = np.flatnonzero(~allowed.any(axis=1))
        if empty.size:
            raise MaskError(f"query row {int(empty[0])} has no allowed key position")
        x = np.where(allowed, x, -np.inf)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    weights = np.exp(shifted)
    if allowed is not None:
        # exp(-inf) is already 0; keep masked slots exact under any rounding
        weights = np.where(allowed, weights, 0.0)
    return weights / np.sum(weights, axis=-1, keepdims=True)
