"""Absorb-decompose of attention projection pairs, pruning, and merging.

Per head, the query and key projections multiply into a single matrix
whose rank is bounded by the head dimension; likewise the value and
output projections. Factoring those products through an SVD rewrites
each pair as orthonormal bases around a small singular-value core.
Directions with (near-)zero singular values can then be dropped without
changing the computed function -- no retraining involved -- and after
fine-tuning the core merges back into the bases so the deployed layer
regains the plain four-matrix form.

Query/key biases are handled by dimension augmentation: the input gains
a constant-1 coordinate and the bias vectors become an extra projection
row, which keeps the absorbed product exact with rank still bounded by
d. The value bias folds into the output bias exactly because attention
rows sum to one.
"""

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionWeights, CloverFactors
from .exceptions import CloverError
from .linalg import householder_qr, product_svd
from .tensor import matmul

__all__ = [
    "PruneStats",
    "SpectrumReport",
    "ParamReport",
    "absorb_qk",
    "absorb_vo",
    "decompose_factors",
    "prune_factors",
    "vanilla_prune",
    "merge_back",
    "count_params",
    "spectrum_report",
]

CSV_FLOAT = "%.17g"
SPECTRUM_CSV_HEADER = "layer,head,index,value,kind"


def absorb_qk(w):
    """Per-head low-rank pair (a[i], b[i]) with W_QK[i] = a[i] @ b[i].

    a[i] stacks the query slab (plus the query bias as an extra row when
    any query/key bias is present); b[i] is the transposed, equally
    augmented key slab. Callers never need to materialize the product.
    """
    D, h, d = w.dims
    d_q = D + 1 if w.has_qk_bias else D
    a = np.zeros((h, d_q, d))
    b = np.zeros((h, d, d_q))
    for i in range(h):
        aq = w.w_q[:, i, :]
        ak = w.w_k[:, i, :]
        if w.has_qk_bias:
            bq = w.b_q[i] if w.b_q is not None else np.zeros(d)
            bk = w.b_k[i] if w.b_k is not None else np.zeros(d)
            aq = np.vstack([aq, bq[None, :]])
            ak = np.vstack([ak, bk[None, :]])
        a[i] = aq
        b[i] = ak.T
    return a, b


def absorb_vo(w):
    """Per-head pair for W_VO[i] = w_v slab @ w_o slab, plus the folded output bias.

    Attention rows sum to one, so the value bias contributes a constant
    b_v[i]ᵀ w_o[i] per position and folds exactly into the output bias.
    """
    D, h, d = w.dims
    a = np.zeros((h, D, d))
    b = np.zeros((h, d, D))
    for i in range(h):
        a[i] = w.w_v[:, i, :]
        b[i] = w.w_o[i]
    folded = None
    if w.b_o is not None:
        folded = w.b_o.copy()
    if w.b_v is not None:
        if folded is None:
            folded = np.zeros(D)
        for i in range(h):
            folded = folded + matmul(w.b_v[i][None, :], w.w_o[i])[0]
    return a, b, folded


def decompose_factors(w, mode="svd"):
    """Factor the absorbed pairs of ``w`` into a :class:`CloverFactors`.

    ``mode="svd"`` decomposes both pairs with the product SVD. ``mode="qr"``
    QR-factors the query and key slabs head by head instead (the route for
    models with rotary embeddings between the projections) and keeps the
    SVD on the value/output pair. Both are exact rewrites: the factored
    forward reproduces the plain forward.
    """
    if mode not in ("svd", "qr"):
        raise CloverError(f"unknown decomposition mode {mode!r}")
    D, h, d = w.dims

    a_vo, b_vo, folded_b_o = absorb_vo(w)
    u_vo = np.zeros((h, D, d))
    s_vo = np.zeros((h, d))
    v_vo = np.zeros((h, d, D))
    for i in range(h):
        try:
            fac = product_svd(a_vo[i], b_vo[i])
        except CloverError as exc:
            raise CloverError(f"value/output decomposition failed for head {i}: {exc}") from exc
        u_vo[i], s_vo[i], v_vo[i] = fac.u, fac.s, fac.v

    if mode == "svd":
        a_qk, b_qk = absorb_qk(w)
        d_q = a_qk.shape[1]
        u_qk = np.zeros((h, d_q, d))
        s_qk = np.zeros((h, d))
        v_qk = np.zeros((h, d, d_q))
        for i in range(h):
            try:
                fac = product_svd(a_qk[i], b_qk[i])
            except CloverError as exc:
                raise CloverError(f"query/key decomposition failed for head {i}: {exc}") from exc
            u_qk[i], s_qk[i], v_qk[i] = fac.u, fac.s, fac.v
        return CloverFactors(
            mode="svd",
            dims=w.dims,
            u_qk=u_qk,
            s_qk=s_qk,
            v_qk=v_qk,
            rank_qk=np.full(h, d, dtype=np.int64),
            u_vo=u_vo,
            s_vo=s_vo,
            v_vo=v_vo,
            rank_vo=np.full(h, d, dtype=np.int64),
            folded_b_o=folded_b_o,
        )

    if w.has_qk_bias:
        raise CloverError("qr mode does not support query/key biases")
    q_q = np.zeros((h, D, d))
    r_q = np.zeros((h, d, d))
    q_k = np.zeros((h, D, d))
    r_k = np.zeros((h, d, d))
    for i in range(h):
        try:
            fq = householder_qr(w.w_q[:, i, :])
            fk = householder_qr(w.w_k[:, i, :])
        except CloverError as exc:
            raise CloverError(f"query/key QR failed for head {i}: {exc}") from exc
        q_q[i], r_q[i] = fq.q, fq.r
        q_k[i], r_k[i] = fk.q, fk.r
    return CloverFactors(
        mode="qr",
        dims=w.dims,
        q_q=q_q,
        r_q=r_q,
        q_k=q_k,
        r_k=r_k,
        u_vo=u_vo,
        s_vo=s_vo,
        v_vo=v_vo,
        rank_vo=np.full(h, d, dtype=np.int64),
        folded_b_o=folded_b_o,
    )


@dataclass(frozen=True)
class PruneStats:
    """Retained ranks and parameter accounting for one pruning pass."""

    per_head_rank_qk: list
    per_head_rank_vo: list
    params_before_qk: int
    params_after_qk: int
    params_before_vo: int
    params_after_vo: int

    @property
    def params_before_total(self):
        return self.params_before_qk + self.params_before_vo

    @property
    def params_after_total(self):
        return self.params_after_qk + self.params_after_vo

    @property
    def reduction_qk_pct(self):
        return _reduction_pct(self.params_before_qk, self.params_after_qk)

    @property
    def reduction_vo_pct(self):
        return _reduction_pct(self.params_before_vo, self.params_after_vo)

    @property
    def reduction_total_pct(self):
        return _reduction_pct(self.params_before_total, self.params_after_total)

    def to_table(self):
        lines = ["head  rank_qk  rank_vo"]
        for i, (rq, rv) in enumerate(zip(self.per_head_rank_qk, self.per_head_rank_vo)):
            lines.append(f"{i:>4}  {rq:>7}  {rv:>7}")
        lines.append("")
        lines.append(f"params qk    : {self.params_before_qk} -> {self.params_after_qk} ({self.reduction_qk_pct:.2f}% removed)")
        lines.append(f"params vo    : {self.params_before_vo} -> {self.params_after_vo} ({self.reduction_vo_pct:.2f}% removed)")
        lines.append(f"params total : {self.params_before_total} -> {self.params_after_total} ({self.reduction_total_pct:.2f}% removed)")
        return "\n".join(lines)

    def to_csv(self, layer=0):
        rows = [SPECTRUM_CSV_HEADER]
        for i, rank in enumerate(self.per_head_rank_qk):
            rows.append(f"{layer},{i},0,{CSV_FLOAT % rank},rank_qk")
        for i, rank in enumerate(self.per_head_rank_vo):
            rows.append(f"{layer},{i},0,{CSV_FLOAT % rank},rank_vo")
        scalars = [
            ("params_before_qk", self.params_before_qk),
            ("params_after_qk", self.params_after_qk),
            ("params_before_vo", self.params_before_vo),
            ("params_after_vo", self.params_after_vo),
            ("reduction_qk_pct", self.reduction_qk_pct),
            ("reduction_vo_pct", self.reduction_vo_pct),
            ("reduction_total_pct", self.reduction_total_pct),
        ]
        for kind, value in scalars:
            rows.append(f"{layer},-1,0,{CSV_FLOAT % value},{kind}")
        return "\n".join(rows) + "\n"


def _reduction_pct(before, after):
    if before == 0:
        return 0.0
    return 100.0 * (1.0 - after / before)


def prune_factors(f, threshold_qk, threshold_vo):
    """Drop singular triples with s <= threshold, per head, per pair.

    One global threshold per pair; retained ranks may differ across heads
    and the slabs are zero-padded to the per-pair maximum so storage stays
    regular (``rank_qk``/``rank_vo`` record the live counts). Attached
    trainable cores are restricted to the kept-by-kept block. Returns the
    pruned factors and a :class:`PruneStats`.
    """
    if f.mode != "svd":
        raise CloverError("pruning needs svd-mode factors; qr factors have no singular values to threshold")
    if threshold_qk < 0 or threshold_vo < 0:
        raise CloverError(f"thresholds must be nonnegative, got ({threshold_qk}, {threshold_vo})")
    D, h, d = f.dims
    d_q = f.d_q

    ranks_qk = np.array([int(np.sum(f.s_qk[i] > threshold_qk)) for i in range(h)], dtype=np.int64)
    ranks_vo = np.array([int(np.sum(f.s_vo[i] > threshold_vo)) for i in range(h)], dtype=np.int64)
    # keep at least one padded column so downstream tensors stay non-empty
    r_qk = max(1, int(ranks_qk.max()))
    r_vo = max(1, int(ranks_vo.max()))

    u_qk = np.zeros((h, d_q, r_qk))
    s_qk = np.zeros((h, r_qk))
    v_qk = np.zeros((h, r_qk, d_q))
    u_vo = np.zeros((h, D, r_vo))
    s_vo = np.zeros((h, r_vo))
    v_vo = np.zeros((h, r_vo, D))
    for i in range(h):
        kq = int(ranks_qk[i])
        kv = int(ranks_vo[i])
        u_qk[i, :, :kq] = f.u_qk[i, :, :kq]
        s_qk[i, :kq] = f.s_qk[i, :kq]
        v_qk[i, :kq, :] = f.v_qk[i, :kq, :]
        u_vo[i, :, :kv] = f.u_vo[i, :, :kv]
        s_vo[i, :kv] = f.s_vo[i, :kv]
        v_vo[i, :kv, :] = f.v_vo[i, :kv, :]

    def _slice_trainable(mat, r_new, ranks):
        if mat is None:
            return None
        out = np.zeros((h, r_new, r_new))
        for i in range(h):
            k = int(ranks[i])
            out[i, :k, :k] = mat[i, :k, :k]
        return out

    pruned = CloverFactors(
        mode="svd",
        dims=f.dims,
        u_qk=u_qk,
        s_qk=s_qk,
        v_qk=v_qk,
        rank_qk=ranks_qk,
        u_vo=u_vo,
        s_vo=s_vo,
        v_vo=v_vo,
        rank_vo=ranks_vo,
        folded_b_o=None if f.folded_b_o is None else f.folded_b_o.copy(),
        trainable_s_qk=_slice_trainable(f.trainable_s_qk, r_qk, ranks_qk),
        trainable_s_vo=_slice_trainable(f.trainable_s_vo, r_vo, ranks_vo),
    )
    stats = PruneStats(
        per_head_rank_qk=[int(r) for r in ranks_qk],
        per_head_rank_vo=[int(r) for r in ranks_vo],
        params_before_qk=h * d * (2 * d_q + 1),
        params_after_qk=int(sum(ranks_qk)) * (2 * d_q + 1),
        params_before_vo=h * d * (2 * D + 1),
        params_after_vo=int(sum(ranks_vo)) * (2 * D + 1),
    )
    return pruned, stats


def _norm_scores(w):
    """Per-head Euclidean norms of the stacked pair columns, both pairs.

    Dimension j of head i scores ||(w_q[:, i, j], w_k[:, i, j])|| on the
    query/key side and ||(w_v[:, i, j], w_o[i, j, :])|| on the value/output
    side. This is the coordinate-aligned baseline ranking.
    """
    qk = np.sqrt(np.sum(w.w_q**2, axis=0) + np.sum(w.w_k**2, axis=0))  # (h, d)
    vo = np.sqrt(np.sum(w.w_v**2, axis=0) + np.sum(w.w_o**2, axis=2))  # (h, d)
    return qk, vo


def vanilla_prune(w, keep_fraction):
    """Zero out the lowest-norm inner dimensions of every head.

    Scores come from :func:`_norm_scores`; the query/key and value/output
    sides are ranked and cut independently. ``keep_fraction`` = 1 is the
    identity. Lossy wherever directions are spread across coordinates.
    """
    D, h, d = w.dims
    if not 0 < keep_fraction <= 1:
        raise CloverError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    keep = max(1, int(math.floor(keep_fraction * d + 1e-9)))
    if keep == d:
        return w
    qk_scores, vo_scores = _norm_scores(w)
    w_q = w.w_q.copy()
    w_k = w.w_k.copy()
    w_v = w.w_v.copy()
    w_o = w.w_o.copy()
    b_q = None if w.b_q is None else w.b_q.copy()
    b_k = None if w.b_k is None else w.b_k.copy()
    b_v = None if w.b_v is None else w.b_v.copy()
    for i in range(h):
        drop_qk = np.argsort(-qk_scores[i], kind="stable")[keep:]
        drop_vo = np.argsort(-vo_scores[i], kind="stable")[keep:]
        w_q[:, i, drop_qk] = 0.0
        w_k[:, i, drop_qk] = 0.0
        w_v[:, i, drop_vo] = 0.0
        w_o[i, drop_vo, :] = 0.0
        if b_q is not None:
            b_q[i, drop_qk] = 0.0
        if b_k is not None:
            b_k[i, drop_qk] = 0.0
        if b_v is not None:
            b_v[i, drop_vo] = 0.0
    return AttentionWeights(
        w_q=w_q, w_k=w_k, w_v=w_v, w_o=w_o, b_q=b_q, b_k=b_k, b_v=b_v, b_o=w.b_o
    )


def merge_back(f):
    """Fold the singular-value core back into the bases; returns plain weights.

    svd mode: w_q' = u_qk S, w_k' = v_qkᵀ, w_v' = u_vo S_vo, w_o' = v_vo
    (using the trainable full matrices when attached). qr mode merges the
    upper-triangular factors: w_q' = q_q r_q, w_k' = q_k r_k. Slabs are
    zero-padded to a single inner dimension; because the plain forward
    scales logits by the inner dimension it ends up with, the query slab
    absorbs a sqrt(d_new / d) correction so the merged layer computes the
    same function as the factored one. Bias-augmented rows split back into
    query/key biases.
    """
    D, h, d = f.dims

    if f.mode == "qr":
        d_new = d
        w_q = np.zeros((D, h, d_new))
        w_k = np.zeros((D, h, d_new))
        for i in range(h):
            w_q[:, i, :] = matmul(f.q_q[i], f.r_q[i])
            w_k[:, i, :] = matmul(f.q_k[i], f.r_k[i])
        b_q = b_k = None
    else:
        d_new = max(1, int(f.rank_qk.max()), int(f.rank_vo.max()))
        ratio = math.sqrt(d_new / d)
        d_q = f.d_q
        aug_q = np.zeros((h, d_q, d_new))
        aug_k = np.zeros((h, d_q, d_new))
        r_pad = f.s_qk.shape[1]
        for i in range(h):
            if f.trainable_s_qk is not None:
                us = matmul(f.u_qk[i], f.trainable_s_qk[i])
            else:
                us = f.u_qk[i] * f.s_qk[i][None, :]
            aug_q[i, :, :r_pad] = us * ratio
            aug_k[i, :, :r_pad] = f.v_qk[i].T
        if f.has_qk_bias:
            w_q = np.ascontiguousarray(np.transpose(aug_q[:, :D, :], (1, 0, 2)))
            w_k = np.ascontiguousarray(np.transpose(aug_k[:, :D, :], (1, 0, 2)))
            b_q = np.ascontiguousarray(aug_q[:, D, :])
            b_k = np.ascontiguousarray(aug_k[:, D, :])
        else:
            w_q = np.ascontiguousarray(np.transpose(aug_q, (1, 0, 2)))
            w_k = np.ascontiguousarray(np.transpose(aug_k, (1, 0, 2)))
            b_q = b_k = None

    w_v = np.zeros((D, h, d_new))
    w_o = np.zeros((h, d_new, D))
    rv_pad = f.s_vo.shape[1]
    for i in range(h):
        if f.trainable_s_vo is not None:
            us = matmul(f.u_vo[i], f.trainable_s_vo[i])
        else:
            us = f.u_vo[i] * f.s_vo[i][None, :]
        w_v[:, i, :rv_pad] = us
        w_o[i, :rv_pad, :] = f.v_vo[i]

    return AttentionWeights(
        w_q=w_q,
        w_k=w_k,
        w_v=w_v,
        w_o=w_o,
        b_q=b_q,
        b_k=b_k,
        b_v=None,
        b_o=None if f.folded_b_o is None else f.folded_b_o.copy(),
    )


@dataclass(frozen=True)
class ParamReport:
    """Trainable/frozen parameter accounting for one tuning method."""

    method: str
    dims: tuple
    trainable: int
    frozen: int
    formula: str
    variants: tuple = ()
    note: str = ""

    def to_text(self):
        D, h, d = self.dims
        lines = [
            f"method    : {self.method}",
            f"dims      : D={D} h={h} d={d}",
            f"trainable : {self.trainable:,}   [{self.formula}]",
            f"frozen    : {self.frozen:,}",
        ]
        if self.variants:
            lines.append("variants  :")
            for label, formula, count in self.variants:
                lines.append(f"  {label}: {count:,}   [{formula}]")
        if self.note:
            lines.append(f"note      : {self.note}")
        return "\n".join(lines)


def count_params(dims, method, rank=None, targets=("q", "k", "v")):
    """Closed-form trainable/frozen parameter counts.

    ``method`` is ``"clover"``, ``"lora"``, ``"dora"`` (the latter two need
    ``rank``) or ``"full"``. Low-rank adapter counts cover the given target
    projections; counting covers attention projection entries only.
    """
    D, h, d = dims
    all_proj = 4 * D * h * d
    if method == "clover":
        upper_tri = 2 * h * (d * (d + 1) // 2)
        full_head = h * d * d
        qr_count = upper_tri + full_head
        variants = (
            ("qr-route-with-full-qk-core", "2*h*d*(d+1)/2 + 2*h*d^2", qr_count + full_head),
            ("svd-route-both-cores", "2*h*d^2", 2 * full_head),
        )
        note = (
            "upper-triangular accounting is smaller than rank-64 low-rank adapters on "
            "q,k,v at width 4096; treating the query/key core as a full head-wise matrix "
            "makes the counts comparable (both shown)"
        )
        return ParamReport(
            method="clover",
            dims=dims,
            trainable=qr_count,
            frozen=all_proj,
            formula="2*h*d*(d+1)/2 + h*d^2",
            variants=variants,
            note=note,
        )
    if method in ("lora", "dora"):
        if rank is None or rank < 0:
            raise CloverError(f"{method} needs a nonnegative rank, got {rank}")
        per_target = rank * (D + h * d)
        count = per_target * len(targets)
        formula = f"{len(targets)}*r*(D + h*d), r={rank}"
        if method == "dora":
            count += D * len(targets)
            formula += f" + {len(targets)}*D"
        return ParamReport(method=method, dims=dims, trainable=count, frozen=all_proj, formula=formula)
    if method == "full":
        return ParamReport(method="full", dims=dims, trainable=all_proj, frozen=0, formula="4*D*h*d")
    raise CloverError(f"unknown parameter-count method {method!r}")


@dataclass(frozen=True)
class SpectrumReport:
    """Per-head singular values next to the coordinate-norm baseline curves."""

    s_qk: np.ndarray  # (h, d) sorted descending
    s_vo: np.ndarray
    norm_qk: np.ndarray  # (h, d) sorted descending
    norm_vo: np.ndarray
    dims: tuple

    def to_csv(self, layer=0):
        rows = [SPECTRUM_CSV_HEADER]
        series = [
            ("sv_qk", self.s_qk),
            ("sv_vo", self.s_vo),
            ("norm_qk", self.norm_qk),
            ("norm_vo", self.norm_vo),
        ]
        h, d = self.s_qk.shape
        for kind, values in series:
            for i in range(h):
                for j in range(d):
                    rows.append(f"{layer},{i},{j},{CSV_FLOAT % values[i, j]},{kind}")
        return "\n".join(rows) + "\n"

    def summary(self):
        h, d = self.s_qk.shape
        lines = [f"heads={h} head_dim={d}"]
        for i in range(h):
            live_qk = int(np.sum(self.s_qk[i] > 1e-12 * max(self.s_qk[i].max(), 1e-300)))
            live_vo = int(np.sum(self.s_vo[i] > 1e-12 * max(self.s_vo[i].max(), 1e-300)))
            lines.append(
                f"head {i}: sv_qk max {self.s_qk[i].max():.6g} live {live_qk}/{d}; "
                f"sv_vo max {self.s_vo[i].max():.6g} live {live_vo}/{d}"
            )
        return "\n".join(lines)


def spectrum_report(w):
    """Singular-value spectra of both absorbed pairs plus the norm baseline."""
    factors = decompose_factors(w, mode="svd")
    qk_scores, vo_scores = _norm_scores(w)
    return SpectrumReport(
        s_qk=factors.s_qk.copy(),
        s_vo=factors.s_vo.copy(),
        norm_qk=-np.sort(-qk_scores, axis=1, kind="stable"),
        norm_vo=-np.sort(-vo_scores, axis=1, kind="stable"),
        dims=w.dims,
    )
