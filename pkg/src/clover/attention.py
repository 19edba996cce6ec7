"""Reference multi-head attention in plain and factored parameterizations.

The plain forward is the oracle every transform in this package is
verified against. The factored forward consumes the orthonormal bases
and singular values produced by ``clover.transform.decompose_factors``
and must reproduce the plain output to high precision.

Weight layout follows the per-head slab convention: query/key/value
projections are (D, h, d) and the output projection is (h, d, D), where
D is the model width, h the head count and d the head dimension.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import CloverError, ShapeError
from .masks import MaskSpec
from .tensor import matmul, softmax_rows
from .validation import as_tensor

__all__ = [
    "AttentionWeights",
    "RopeSpec",
    "CloverFactors",
    "rope_apply",
    "mha_forward",
    "mha_forward_factored",
]


@dataclass(frozen=True)
class RopeSpec:
    """Rotary position embedding switch; requires an even head dimension."""

    enabled: bool = False
    base: float = 10000.0

    def __post_init__(self):
        if self.base <= 0:
            raise CloverError(f"rope base must be positive, got {self.base}")

    @classmethod
    def off(cls):
        return cls(enabled=False)

    @classmethod
    def on(cls, base=10000.0):
        return cls(enabled=True, base=base)


@dataclass(frozen=True)
class AttentionWeights:
    """The four per-head projection tensors plus optional biases."""

    w_q: np.ndarray  # (D, h, d)
    w_k: np.ndarray  # (D, h, d)
    w_v: np.ndarray  # (D, h, d)
    w_o: np.ndarray  # (h, d, D)
    b_q: np.ndarray | None = None  # (h, d)
    b_k: np.ndarray | None = None  # (h, d)
    b_v: np.ndarray | None = None  # (h, d)
    b_o: np.ndarray | None = None  # (D,)
    dims: tuple = field(init=False)

    def __post_init__(self):
        w_q = as_tensor(self.w_q, "w_q", ndim=3)
        D, h, d = w_q.shape
        object.__setattr__(self, "w_q", w_q)
        object.__setattr__(self, "w_k", as_tensor(self.w_k, "w_k", shape=(D, h, d)))
        object.__setattr__(self, "w_v", as_tensor(self.w_v, "w_v", shape=(D, h, d)))
        object.__setattr__(self, "w_o", as_tensor(self.w_o, "w_o", shape=(h, d, D)))
        for name in ("b_q", "b_k", "b_v"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, as_tensor(val, name, shape=(h, d)))
        if self.b_o is not None:
            object.__setattr__(self, "b_o", as_tensor(self.b_o, "b_o", shape=(D,)))
        object.__setattr__(self, "dims", (D, h, d))

    @property
    def has_qk_bias(self):
        return self.b_q is not None or self.b_k is not None

    def tensors(self):
        """Named tensor mapping for serialization."""
        out = {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}
        for name in ("b_q", "b_k", "b_v", "b_o"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val
        return out

    def permute_heads(self, order):
        """Consistent head reordering; observationally a no-op for the forward."""
        order = list(order)
        return AttentionWeights(
            w_q=self.w_q[:, order, :],
            w_k=self.w_k[:, order, :],
            w_v=self.w_v[:, order, :],
            w_o=self.w_o[order, :, :],
            b_q=None if self.b_q is None else self.b_q[order, :],
            b_k=None if self.b_k is None else self.b_k[order, :],
            b_v=None if self.b_v is None else self.b_v[order, :],
            b_o=self.b_o,
        )


@dataclass(frozen=True)
class CloverFactors:
    """Orthonormal bases and singular values for the absorbed projection pairs.

    ``mode`` is ``"svd"`` (both pairs decomposed by SVD) or ``"qr"``
    (query/key slabs QR-factored per head so rotary embeddings can apply
    between them; the value/output pair still uses SVD). Slabs are padded
    with zero columns up to a common per-pair rank; ``rank_qk``/``rank_vo``
    record the live rank of each head. When query/key biases were folded
    in, the bases carry an extra input row and ``d_q`` equals D + 1.
    """

    mode: str
    dims: tuple  # (D, h, d) of the source weights
    u_vo: np.ndarray  # (h, D, r_vo)
    s_vo: np.ndarray  # (h, r_vo)
    v_vo: np.ndarray  # (h, r_vo, D)
    rank_vo: np.ndarray  # (h,) ints
    u_qk: np.ndarray | None = None  # (h, d_q, r_qk)   svd mode
    s_qk: np.ndarray | None = None  # (h, r_qk)
    v_qk: np.ndarray | None = None  # (h, r_qk, d_q)
    rank_qk: np.ndarray | None = None  # (h,)
    q_q: np.ndarray | None = None  # (h, D, d)         qr mode
    r_q: np.ndarray | None = None  # (h, d, d) upper triangular
    q_k: np.ndarray | None = None
    r_k: np.ndarray | None = None
    folded_b_o: np.ndarray | None = None  # (D,)
    trainable_s_qk: np.ndarray | None = None  # (h, r_qk, r_qk) full matrices
    trainable_s_vo: np.ndarray | None = None  # (h, r_vo, r_vo)

    def __post_init__(self):
        if self.mode not in ("svd", "qr"):
            raise CloverError(f"unknown factor mode {self.mode!r}")
        D, h, d = self.dims
        if self.mode == "svd":
            if self.u_qk is None or self.s_qk is None or self.v_qk is None:
                raise CloverError("svd mode requires u_qk, s_qk, v_qk")
            if self.rank_qk is None:
                object.__setattr__(self, "rank_qk", np.full(h, self.s_qk.shape[1], dtype=np.int64))
        else:
            if self.q_q is None or self.r_q is None or self.q_k is None or self.r_k is None:
                raise CloverError("qr mode requires q_q, r_q, q_k, r_k")
        if self.rank_vo is None:
            object.__setattr__(self, "rank_vo", np.full(h, self.s_vo.shape[1], dtype=np.int64))

    @property
    def d_q(self):
        """Input width of the query/key bases (D, or D + 1 when bias-augmented)."""
        if self.mode == "qr":
            return self.dims[0]
        return self.u_qk.shape[1]

    @property
    def has_qk_bias(self):
        return self.mode == "svd" and self.d_q == self.dims[0] + 1

    def with_trainable(self, **arrays):
        """Copy with trainable matrices (or qr factors) replaced."""
        allowed = {"trainable_s_qk", "trainable_s_vo", "r_q", "r_k"}
        unknown = set(arrays) - allowed
        if unknown:
            raise CloverError(f"unknown trainable fields {sorted(unknown)}")
        return replace(self, **arrays)

    def frozen_tensors(self):
        """The bases that stay fixed during fine-tuning, by name."""
        if self.mode == "svd":
            out = {"u_qk": self.u_qk, "v_qk": self.v_qk}
        else:
            out = {"q_q": self.q_q, "q_k": self.q_k}
        out.update({"u_vo": self.u_vo, "v_vo": self.v_vo})
        return out


def rope_apply(x, base=10000.0):
    """Rotate coordinate pairs (2j, 2j+1) by angle pos * base^(-2j/d).

    ``x`` has positions along axis -2 and an even head dimension on the
    last axis; per-position vector norms are preserved exactly as befits
    a rotation.
    """
    return _rope_rotate(x, base, direction=1.0)


def _rope_rotate(x, base, direction):
    x = as_tensor(x, "x")
    d = x.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"rope needs an even head dimension, got {d}")
    n = x.shape[-2]
    j = np.arange(d // 2, dtype=np.float64)
    freqs = float(base) ** (-2.0 * j / d)
    angles = direction * np.arange(n, dtype=np.float64)[:, None] * freqs[None, :]
    cos = np.cos(angles)
    sin = np.sin(angles)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _project(x, slab, bias=None):
    """(b, n, D) x (D, d) -> (b, n, d), optional bias added per position."""
    b, n, D = x.shape
    y = matmul(x.reshape(b * n, D), slab).reshape(b, n, slab.shape[1])
    if bias is not None:
        y = y + bias
    return y


def _bmm(a, b):
    """Batched matmul over the leading axis; b may be shared (2-d) or batched (3-d)."""
    if b.ndim == 2:
        return np.stack([matmul(a[i], b) for i in range(a.shape[0])])
    return np.stack([matmul(a[i], b[i]) for i in range(a.shape[0])])


def _check_input(x, D):
    x = as_tensor(x, "x", ndim=3)
    if x.shape[2] != D:
        raise ShapeError(f"input width {x.shape[2]} does not match model width {D}")
    return x


def mha_forward(x, w, mask=None, rope=None):
    """Plain multi-head attention: per head softmax(Q Kᵀ / sqrt(d)) V W_o, summed."""
    mask = mask or MaskSpec.none()
    rope = rope or RopeSpec.off()
    D, h, d = w.dims
    x = _check_input(x, D)
    if rope.enabled and d % 2 != 0:
        raise ShapeError(f"rope needs an even head dimension, got {d}")
    scale = math.sqrt(d)
    y = np.zeros_like(x)
    for i in range(h):
        q = _project(x, w.w_q[:, i, :], None if w.b_q is None else w.b_q[i])
        k = _project(x, w.w_k[:, i, :], None if w.b_k is None else w.b_k[i])
        if rope.enabled:
            q = rope_apply(q, rope.base)
            k = rope_apply(k, rope.base)
        logits = _bmm(q, np.swapaxes(k, 1, 2)) / scale
        attn = softmax_rows(logits, mask)
        v = _project(x, w.w_v[:, i, :], None if w.b_v is None else w.b_v[i])
        y += _bmm(_bmm(attn, v), w.w_o[i])
    if w.b_o is not None:
        y = y + w.b_o
    return y


def mha_forward_factored(x, f, mask=None, rope=None):
    """Attention through the factored parameterization.

    In svd mode the per-head logits are (x' u) S (v x'ᵀ) / sqrt(d) with x'
    carrying an appended constant-1 coordinate when biases were absorbed;
    rotary embeddings are rejected because they sit between the absorbed
    projections. In qr mode queries/keys are rebuilt as x q_q r_q (and
    likewise for keys) so the rotation applies in the usual place.
    Trainable full S matrices, when attached, replace the diagonal.
    """
    y, _ = _forward_factored_impl(x, f, mask or MaskSpec.none(), rope or RopeSpec.off(), want_cache=False)
    return y


def _forward_factored_impl(x, f, mask, rope, want_cache):
    D, h, d = f.dims
    x = _check_input(x, D)
    if f.mode == "svd" and rope.enabled:
        raise CloverError("rotary embeddings are incompatible with svd-absorbed query/key factors; use qr mode")
    scale = math.sqrt(d)

    if f.mode == "svd" and f.has_qk_bias:
        ones = np.ones(x.shape[:2] + (1,))
        x_aug = np.concatenate([x, ones], axis=2)
    else:
        x_aug = x

    cache = {"heads": [], "x": x, "x_aug": x_aug} if want_cache else None
    y = np.zeros_like(x)
    for i in range(h):
        if f.mode == "svd":
            p = _project(x_aug, f.u_qk[i])
            m = _project(x_aug, f.v_qk[i].T)
            if f.trainable_s_qk is not None:
                ps = _bmm(p, f.trainable_s_qk[i])
            else:
                ps = p * f.s_qk[i][None, None, :]
            logits = _bmm(ps, np.swapaxes(m, 1, 2)) / scale
            head_cache = {"p": p, "m": m}
        else:
            pq = _project(x, f.q_q[i])
            pk = _project(x, f.q_k[i])
            q_pre = _bmm(pq, f.r_q[i])
            k_pre = _bmm(pk, f.r_k[i])
            if rope.enabled:
                q_rot = rope_apply(q_pre, rope.base)
                k_rot = rope_apply(k_pre, rope.base)
            else:
                q_rot, k_rot = q_pre, k_pre
            logits = _bmm(q_rot, np.swapaxes(k_rot, 1, 2)) / scale
            head_cache = {"pq": pq, "pk": pk, "q_rot": q_rot, "k_rot": k_rot}
        attn = softmax_rows(logits, mask)
        wv = _project(x, f.u_vo[i])
        ctx = _bmm(attn, wv)
        if f.trainable_s_vo is not None:
            ctx_s = _bmm(ctx, f.trainable_s_vo[i])
        else:
            ctx_s = ctx * f.s_vo[i][None, None, :]
        y += _bmm(ctx_s, f.v_vo[i])
        if want_cache:
            head_cache.update({"attn": attn, "wv": wv, "ctx": ctx})
            cache["heads"].append(head_cache)
    if f.folded_b_o is not None:
        y = y + f.folded_b_o
    return y, cache
