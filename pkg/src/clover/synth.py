"""Synthetic attention weights for tests, demos, and the CLI ``gen`` command."""

import numpy as np

from .attention import AttentionWeights
from .exceptions import CloverError
from .rng import make_rng

__all__ = ["random_weights", "low_rank_weights", "random_inputs"]


def random_weights(D, h, d, seed=0, bias=False, scale=None):
    """Full-rank random weights; entries N(0, scale^2), scale defaults to 1/sqrt(D)."""
    if scale is None:
        scale = 1.0 / np.sqrt(D)
    rng = make_rng(seed, 0)
    kw = {}
    if bias:
        kw = {
            "b_q": rng.normal(scale=scale, size=(h, d)),
            "b_k": rng.normal(scale=scale, size=(h, d)),
            "b_v": rng.normal(scale=scale, size=(h, d)),
            "b_o": rng.normal(scale=scale, size=D),
        }
    return AttentionWeights(
        w_q=rng.normal(scale=scale, size=(D, h, d)),
        w_k=rng.normal(scale=scale, size=(D, h, d)),
        w_v=rng.normal(scale=scale, size=(D, h, d)),
        w_o=rng.normal(scale=scale, size=(h, d, D)),
        **kw,
    )


def low_rank_weights(D, h, d, rank, seed=0, noise=0.0, bias=False):
    """Weights whose absorbed per-head products have true rank ``rank``.

    The query and value slabs are built as (D, rank) @ (rank, d) products,
    so exactly ``rank`` singular values of each absorbed pair are nonzero
    while the per-coordinate column norms stay roughly uniform (the
    regime where coordinate-norm pruning is lossy and spectral pruning is
    not). Optional ``noise`` adds dense N(0, noise^2) jitter on top.
    """
    if not 1 <= rank <= d:
        raise CloverError(f"rank must be in [1, {d}], got {rank}")
    rng = make_rng(seed, 1)
    scale = 1.0 / np.sqrt(D)

    def low_rank_slab():
        left = rng.normal(scale=scale, size=(D, rank))
        right = rng.normal(scale=1.0 / np.sqrt(rank), size=(rank, d))
        return left @ right

    w_q = np.stack([low_rank_slab() for _ in range(h)], axis=1)
    w_v = np.stack([low_rank_slab() for _ in range(h)], axis=1)
    w_k = rng.normal(scale=scale, size=(D, h, d))
    w_o = rng.normal(scale=scale, size=(h, d, D))
    if noise:
        w_q = w_q + rng.normal(scale=noise, size=w_q.shape)
        w_k = w_k + rng.normal(scale=noise, size=w_k.shape)
        w_v = w_v + rng.normal(scale=noise, size=w_v.shape)
        w_o = w_o + rng.normal(scale=noise, size=w_o.shape)
    kw = {}
    if bias:
        kw = {
            "b_q": rng.normal(scale=scale, size=(h, d)),
            "b_k": rng.normal(scale=scale, size=(h, d)),
            "b_v": rng.normal(scale=scale, size=(h, d)),
            "b_o": rng.normal(scale=scale, size=D),
        }
    return AttentionWeights(w_q=w_q, w_k=w_k, w_v=w_v, w_o=w_o, **kw)


def random_inputs(batch, n, D, seed=0):
    """A (batch, n, D) standard-normal probe batch."""
    return make_rng(seed, 2).normal(size=(batch, n, D))
