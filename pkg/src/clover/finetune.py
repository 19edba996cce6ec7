"""Constrained fine-tuning: orthonormal bases frozen, cores trainable.

Only the head-wise singular-value matrices (svd mode) or the
upper-triangular query/key factors plus the value/output core (qr mode)
receive gradients; the bases are used in the forward pass and never
updated, which a checksum verifies on every step. Gradients are exact
analytic reverse-mode expressions through the factored attention
forward, validated against central finite differences.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    CloverFactors,
    RopeSpec,
    _forward_factored_impl,
    _rope_rotate,
    mha_forward_factored,
)
from .exceptions import CloverError, TrainingDivergedError
from .masks import MaskSpec
from .rng import make_rng
from .tensor import matmul

__all__ = [
    "Batch",
    "ToyTask",
    "TrainState",
    "factored_forward_cached",
    "factored_backward",
    "finite_diff_check",
    "make_toy_task",
    "teacher_factors",
    "task_batch",
    "init_train_state",
    "train_toy",
    "mse_loss",
]

_TRAINABLE_FIELD = {
    "s_qk": "trainable_s_qk",
    "s_vo": "trainable_s_vo",
    "r_q": "r_q",
    "r_k": "r_k",
}

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def factored_forward_cached(x, f, mask=None, rope=None):
    """Factored forward that also returns the intermediates backward needs."""
    return _forward_factored_impl(x, f, mask or MaskSpec.none(), rope or RopeSpec.off(), want_cache=True)


def _softmax_backward(attn, d_attn):
    # J_softmax applied row-wise; masked entries carry attn == 0 exactly,
    # so their gradient is exactly 0 as well
    inner = np.sum(attn * d_attn, axis=-1, keepdims=True)
    return attn * (d_attn - inner)


def factored_backward(x, f, mask, rope, upstream_grad, cache):
    """Gradients of the factored forward w.r.t. the trainable cores only.

    Returns a dict keyed by parameter name ("s_qk"/"s_vo" in svd mode,
    "r_q"/"r_k"/"s_vo" in qr mode). Upper-triangular parameters get
    gradients that are exactly zero below the diagonal because only the
    triangle is a parameter. Requires the cache from
    :func:`factored_forward_cached`.
    """
    if cache is None:
        raise CloverError("missing forward cache; call factored_forward_cached first")
    x = np.asarray(x, dtype=np.float64)
    if cache["x"].shape != x.shape:
        raise CloverError(
            f"cache was built for input shape {cache['x'].shape}, got {x.shape}"
        )
    rope = rope or RopeSpec.off()
    D, h, d = f.dims
    scale = math.sqrt(d)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != cache["x"].shape:
        raise CloverError(f"upstream gradient shape {g.shape} does not match output {cache['x'].shape}")

    if f.mode == "svd":
        if f.trainable_s_qk is None and f.trainable_s_vo is None:
            raise CloverError("no trainable cores attached to svd-mode factors")
        grads = {}
        if f.trainable_s_qk is not None:
            grads["s_qk"] = np.zeros_like(f.trainable_s_qk)
        if f.trainable_s_vo is not None:
            grads["s_vo"] = np.zeros_like(f.trainable_s_vo)
    else:
        grads = {"r_q": np.zeros_like(f.r_q), "r_k": np.zeros_like(f.r_k)}
        if f.trainable_s_vo is not None:
            grads["s_vo"] = np.zeros_like(f.trainable_s_vo)

    batch = g.shape[0]
    for i in range(h):
        hc = cache["heads"][i]
        attn, wv, ctx = hc["attn"], hc["wv"], hc["ctx"]
        s_vo = f.trainable_s_vo[i] if f.trainable_s_vo is not None else np.diag(f.s_vo[i])
        d_ctx = np.zeros_like(ctx)
        d_attn = np.zeros_like(attn)
        for bi in range(batch):
            t1 = matmul(g[bi], f.v_vo[i].T)  # (n, rv)
            if "s_vo" in grads:
                grads["s_vo"][i] += matmul(ctx[bi].T, t1)
            d_ctx[bi] = matmul(t1, s_vo.T)
            d_attn[bi] = matmul(d_ctx[bi], wv[bi].T)
        d_logits = _softmax_backward(attn, d_attn)

        if f.mode == "svd":
            if "s_qk" in grads:
                p, m = hc["p"], hc["m"]
                for bi in range(batch):
                    grads["s_qk"][i] += matmul(matmul(p[bi].T, d_logits[bi]), m[bi]) / scale
        else:
            q_rot, k_rot = hc["q_rot"], hc["k_rot"]
            d_qrot = np.zeros_like(q_rot)
            d_krot = np.zeros_like(k_rot)
            for bi in range(batch):
                d_qrot[bi] = matmul(d_logits[bi], k_rot[bi]) / scale
                d_krot[bi] = matmul(d_logits[bi].T, q_rot[bi]) / scale
            if rope.enabled:
                # the rotation is orthogonal and parameter-free: pull the
                # gradient back through it by rotating with negated angles
                d_qpre = _rope_rotate(d_qrot, rope.base, direction=-1.0)
                d_kpre = _rope_rotate(d_krot, rope.base, direction=-1.0)
            else:
                d_qpre, d_kpre = d_qrot, d_krot
            pq, pk = hc["pq"], hc["pk"]
            for bi in range(batch):
                grads["r_q"][i] += np.triu(matmul(pq[bi].T, d_qpre[bi]))
                grads["r_k"][i] += np.triu(matmul(pk[bi].T, d_kpre[bi]))
    return grads


def mse_loss(y_pred, y_true):
    """Mean squared error and its gradient w.r.t. the prediction."""
    diff = y_pred - y_true
    with np.errstate(over="ignore", invalid="ignore"):
        loss = float(np.mean(diff * diff))
        grad = (2.0 / diff.size) * diff
    return loss, grad


def _cross_entropy(y_last, readout, targets):
    """Softmax cross-entropy of a linear readout on the final position."""
    logits = matmul(y_last, readout)  # (b, vocab)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    b = y_last.shape[0]
    loss = float(-np.mean(np.log(probs[np.arange(b), targets])))
    d_logits = probs.copy()
    d_logits[np.arange(b), targets] -= 1.0
    d_logits /= b
    d_y_last = matmul(d_logits, readout.T)
    d_readout = matmul(y_last.T, d_logits)
    return loss, d_y_last, d_readout


def finite_diff_check(f, x, y, mask=None, rope=None, eps=1e-5, n_coords=200, seed=0):
    """Worst-case relative error between analytic and central-difference gradients.

    Central differences run per trainable coordinate on the MSE loss
    against ``y``; when the model has more coordinates than ``n_coords``
    a deterministic subset is sampled. ``eps`` must lie in [1e-7, 1e-3].
    """
    if not 1e-7 <= eps <= 1e-3:
        raise CloverError(f"eps must be in [1e-7, 1e-3], got {eps}")
    mask = mask or MaskSpec.none()
    rope = rope or RopeSpec.off()
    y_pred, cache = factored_forward_cached(x, f, mask, rope)
    _, upstream = mse_loss(y_pred, y)
    grads = factored_backward(x, f, mask, rope, upstream, cache)

    coords = []
    for name in sorted(grads):
        arr = _get_param(f, name)
        for flat in range(arr.size):
            idx = np.unravel_index(flat, arr.shape)
            if name in ("r_q", "r_k") and idx[1] > idx[2]:
                continue  # below-diagonal entries are not parameters
            coords.append((name, idx))
    if len(coords) > n_coords:
        pick = make_rng(seed, 3).choice(len(coords), size=n_coords, replace=False)
        coords = [coords[int(k)] for k in sorted(pick)]

    worst = 0.0
    for name, idx in coords:
        base = _get_param(f, name)
        bumped = base.copy()
        bumped[idx] += eps
        loss_hi, _ = _loss_at(f, name, bumped, x, y, mask, rope)
        bumped[idx] = base[idx] - eps
        loss_lo, _ = _loss_at(f, name, bumped, x, y, mask, rope)
        numeric = (loss_hi - loss_lo) / (2.0 * eps)
        analytic = float(grads[name][idx])
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def _get_param(f, name):
    return getattr(f, _TRAINABLE_FIELD[name])


def _loss_at(f, name, value, x, y, mask, rope):
    trial = f.with_trainable(**{_TRAINABLE_FIELD[name]: value})
    pred = mha_forward_factored(x, trial, mask, rope)
    return mse_loss(pred, y)


@dataclass(frozen=True)
class ToyTask:
    """Deterministic desk-scale task; everything regenerates from the seed."""

    kind: str  # "sequence-regression" | "associative-recall"
    seed: int
    batch: int
    seq: int
    width: int
    teacher_scale: float = 1.0
    teacher_jitter: float = 0.25
    vocab: int = 8
    n_batches: int = 1


def make_toy_task(kind, seed, dims, teacher_scale=1.0, teacher_jitter=0.25, vocab=8, n_batches=1):
    """Build a :class:`ToyTask`; ``dims`` is (batch, seq, width)."""
    kinds = ("sequence-regression", "associative-recall")
    if kind not in kinds:
        raise CloverError(f"unknown task kind {kind!r}; expected one of {kinds}")
    b, n, D = dims
    if not (1 <= b <= 8 and 1 <= n <= 32 and 1 <= D <= 32):
        raise CloverError(f"task dims out of range (b <= 8, n <= 32, D <= 32): {dims}")
    if kind == "associative-recall":
        pairs = (n - 1) // 2
        if pairs < 1:
            raise CloverError(f"associative recall needs seq >= 3, got {n}")
        if pairs > vocab // 2:
            raise CloverError(
                f"associative recall with seq {n} needs vocab >= {2 * pairs}, got {vocab}"
            )
    return ToyTask(
        kind=kind,
        seed=int(seed),
        batch=b,
        seq=n,
        width=D,
        teacher_scale=teacher_scale,
        teacher_jitter=teacher_jitter,
        vocab=vocab,
        n_batches=n_batches,
    )


def teacher_factors(f, task):
    """Hidden target cores sharing the student's frozen bases.

    The teacher scales the diagonal by ``teacher_scale`` and adds
    ``teacher_jitter``-sized off-diagonal structure, so it lies inside the
    model class by construction and the student can recover it exactly.
    """
    rng = make_rng(task.seed, 10)
    D, h, d = f.dims
    updates = {}
    if f.mode == "svd":
        updates["trainable_s_qk"] = _jittered_core(f.s_qk, task, rng)
    else:
        level = task.teacher_jitter * max(float(np.mean(np.abs(f.r_q))), 1e-12)
        updates["r_q"] = f.r_q * task.teacher_scale + np.triu(rng.normal(scale=level, size=f.r_q.shape))
        level = task.teacher_jitter * max(float(np.mean(np.abs(f.r_k))), 1e-12)
        updates["r_k"] = f.r_k * task.teacher_scale + np.triu(rng.normal(scale=level, size=f.r_k.shape))
    updates["trainable_s_vo"] = _jittered_core(f.s_vo, task, rng)
    return f.with_trainable(**updates)


def _jittered_core(s, task, rng):
    h, r = s.shape
    core = np.zeros((h, r, r))
    level = task.teacher_jitter * max(float(np.mean(s)), 1e-12)
    for i in range(h):
        core[i] = np.diag(task.teacher_scale * s[i]) + rng.normal(scale=level, size=(r, r))
    return core


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray | None = None  # regression target
    targets: np.ndarray | None = None  # recall token ids
    tokens: np.ndarray | None = None  # recall token sequence, for inspection


def task_batch(task, step, f=None, mask=None, rope=None, held_out=False):
    """Deterministic batch for ``step``; cycles through ``task.n_batches``.

    Regression targets are produced by the teacher forward and therefore
    need the student factors ``f`` plus the mask/rope configuration in
    use. ``held_out`` switches to a disjoint stream for evaluation data.
    """
    if held_out:
        rng = make_rng(task.seed, 200, int(step))
    else:
        rng = make_rng(task.seed, 100, int(step) % task.n_batches)
    if task.kind == "sequence-regression":
        if f is None:
            raise CloverError("sequence-regression batches need the student factors")
        x = rng.normal(size=(task.batch, task.seq, task.width))
        y = mha_forward_factored(x, teacher_factors(f, task), mask, rope)
        return Batch(x=x, y=y)

    emb = task_embedding(task)
    keys = np.stack(
        [rng.choice(task.vocab // 2, size=(task.seq - 1) // 2, replace=False) for _ in range(task.batch)]
    )
    values = rng.integers(task.vocab // 2, task.vocab, size=keys.shape)
    query_slot = rng.integers(0, keys.shape[1], size=task.batch)
    tokens = np.zeros((task.batch, task.seq), dtype=np.int64)
    for bi in range(task.batch):
        for j in range(keys.shape[1]):
            tokens[bi, 2 * j] = keys[bi, j]
            tokens[bi, 2 * j + 1] = values[bi, j]
        tokens[bi, -1] = keys[bi, query_slot[bi]]
    targets = values[np.arange(task.batch), query_slot]
    x = emb[tokens]
    return Batch(x=x, targets=targets, tokens=tokens)


def task_embedding(task):
    """Fixed token embedding for the recall task (frozen, seed-derived)."""
    return make_rng(task.seed, 20).normal(size=(task.vocab, task.width))


def init_readout(task):
    """Trainable vocabulary readout for the recall task (extra plumbing)."""
    return make_rng(task.seed, 21).normal(scale=1.0 / math.sqrt(task.width), size=(task.width, task.vocab))


@dataclass
class TrainState:
    """Trainable parameters, optimizer moments, and run bookkeeping."""

    factors: CloverFactors  # frozen bases (original cores untouched)
    trainable: dict
    moments_m: dict
    moments_v: dict
    optimizer: str
    lr: float
    step: int = 0
    loss_history: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    frozen_checksum: str = ""
    trained_names: tuple = ()

    def current_factors(self):
        """Factors with the live trainable arrays attached."""
        updates = {
            _TRAINABLE_FIELD[name]: self.trainable[name]
            for name in self.trained_names
            if name in _TRAINABLE_FIELD
        }
        return self.factors.with_trainable(**updates)

    def loss_csv(self):
        rows = ["step,loss,grad_norm"]
        for i, (loss, gn) in enumerate(zip(self.loss_history, self.grad_norms)):
            rows.append(f"{i},{loss:.17g},{gn:.17g}")
        return "\n".join(rows) + "\n"


def _default_trainable_names(f, include_readout):
    names = ["s_qk", "s_vo"] if f.mode == "svd" else ["r_q", "r_k", "s_vo"]
    if include_readout:
        names.append("readout")
    return tuple(names)


def _diag_embed(s):
    h, r = s.shape
    out = np.zeros((h, r, r))
    for i in range(h):
        out[i] = np.diag(s[i])
    return out


def _frozen_arrays(f, trained_names):
    out = dict(f.frozen_tensors())
    out["s_vo"] = f.s_vo
    if f.mode == "svd":
        out["s_qk"] = f.s_qk
    else:
        if "r_q" not in trained_names:
            out["r_q"] = f.r_q
        if "r_k" not in trained_names:
            out["r_k"] = f.r_k
    if f.folded_b_o is not None:
        out["folded_b_o"] = f.folded_b_o
    return out


def frozen_checksum(f, trained_names):
    """SHA-256 over every tensor that must stay bit-identical during training."""
    digest = hashlib.sha256()
    for name, arr in sorted(_frozen_arrays(f, trained_names).items()):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def init_train_state(f, trainable="all", optimizer="adam", lr=1e-2, task=None):
    """Trainable cores initialized so step 0 reproduces the source function.

    svd mode starts the full head-wise matrices at diag(s): off-diagonal
    entries are exactly zero and only become nonzero through learning. qr
    mode starts from the decomposition's upper-triangular factors.
    """
    if optimizer not in ("adam", "sgd"):
        raise CloverError(f"unknown optimizer {optimizer!r}")
    include_readout = task is not None and task.kind == "associative-recall"
    if trainable == "all":
        names = _default_trainable_names(f, include_readout)
    else:
        names = tuple(trainable)
        valid = set(_TRAINABLE_FIELD) | {"readout"}
        unknown = set(names) - valid
        if unknown:
            raise CloverError(f"unknown trainable names {sorted(unknown)}")
        if f.mode == "svd" and ("r_q" in names or "r_k" in names):
            raise CloverError("r_q/r_k are qr-mode parameters")
        if f.mode == "qr" and "s_qk" in names:
            raise CloverError("s_qk is an svd-mode parameter")

    params = {}
    for name in names:
        if name == "s_qk":
            params[name] = _diag_embed(f.s_qk)
        elif name == "s_vo":
            params[name] = _diag_embed(f.s_vo)
        elif name == "r_q":
            params[name] = f.r_q.copy()
        elif name == "r_k":
            params[name] = f.r_k.copy()
        elif name == "readout":
            if task is None:
                raise CloverError("readout training needs a task")
            params[name] = init_readout(task)

    return TrainState(
        factors=f,
        trainable=params,
        moments_m={k: np.zeros_like(v) for k, v in params.items()},
        moments_v={k: np.zeros_like(v) for k, v in params.items()},
        optimizer=optimizer,
        lr=lr,
        frozen_checksum=frozen_checksum(f, names),
        trained_names=names,
    )


def _apply_update(state, grads):
    t = state.step + 1
    for name in state.trained_names:
        g = grads[name]
        theta = state.trainable[name]
        if state.optimizer == "sgd":
            theta -= state.lr * g
        else:
            m = state.moments_m[name]
            v = state.moments_v[name]
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            m_hat = m / (1 - ADAM_BETA1**t)
            v_hat = v / (1 - ADAM_BETA2**t)
            theta -= state.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if name in ("r_q", "r_k"):
            state.trainable[name] = np.triu(theta)


def train_toy(f, task, steps, lr, optimizer="adam", mask=None, rope=None, trainable="all"):
    """Deterministic training loop on a toy task; returns the TrainState.

    The frozen-base checksum is re-verified every step; a non-finite loss
    aborts with the offending step index.
    """
    if steps < 1:
        raise CloverError(f"steps must be >= 1, got {steps}")
    mask = mask or MaskSpec.none()
    rope = rope or RopeSpec.off()
    state = init_train_state(f, trainable=trainable, optimizer=optimizer, lr=lr, task=task)

    batch_cache = {}
    for step in range(steps):
        index = step % task.n_batches
        if index not in batch_cache:
            batch_cache[index] = task_batch(task, step, f=f, mask=mask, rope=rope)
        batch = batch_cache[index]
        current = state.current_factors()
        y_pred, cache = factored_forward_cached(batch.x, current, mask, rope)
        if task.kind == "sequence-regression":
            loss, upstream = mse_loss(y_pred, batch.y)
            readout_grad = None
        else:
            readout = state.trainable.get("readout")
            if readout is None:
                raise CloverError("associative recall requires the readout to be trainable")
            loss, d_y_last, readout_grad = _cross_entropy(y_pred[:, -1, :], readout, batch.targets)
            upstream = np.zeros_like(y_pred)
            upstream[:, -1, :] = d_y_last
        if not math.isfinite(loss):
            raise TrainingDivergedError(step)

        grads = factored_backward(batch.x, current, mask, rope, upstream, cache)
        if readout_grad is not None:
            grads["readout"] = readout_grad
        grads = {name: grads[name] for name in state.trained_names}

        gsq = sum(float(np.sum(g * g)) for g in grads.values())
        state.loss_history.append(loss)
        state.grad_norms.append(math.sqrt(gsq))
        _apply_update(state, grads)
        state.step += 1

        if frozen_checksum(f, state.trained_names) != state.frozen_checksum:
            raise CloverError(f"frozen bases changed at step {step}")  # pragma: no cover
    return state
