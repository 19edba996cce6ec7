"""Estimator-style wrappers so the pipeline composes with scikit-learn.

``CloverOrthogonalizer.fit`` consumes an :class:`AttentionWeights` and
builds the factored parameterization (optionally pruning it);
``transform`` then maps input sequences through the factored attention.
``CloverFineTuner.fit`` runs the constrained training loop on (X, y)
sequence batches. Hyperparameters are plain values so ``get_params`` /
``set_params`` / ``clone`` work as usual.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .attention import AttentionWeights, RopeSpec, mha_forward_factored
from .exceptions import CloverError
from .finetune import (
    factored_backward,
    factored_forward_cached,
    frozen_checksum,
    init_train_state,
    mse_loss,
    _apply_update,
)
from .masks import MaskSpec
from .transform import decompose_factors, merge_back, prune_factors, spectrum_report
from .validation import as_tensor

__all__ = ["CloverOrthogonalizer", "CloverFineTuner"]


def _as_batch(X, D):
    """Accept (n, D) or (b, n, D); returns (x3d, had_batch_axis)."""
    x = as_tensor(X, "X")
    if x.ndim == 2:
        if x.shape[1] != D:
            raise CloverError(f"input width {x.shape[1]} does not match model width {D}")
        return x[None, :, :], False
    if x.ndim == 3:
        return x, True
    raise CloverError(f"X must be (n, D) or (batch, n, D), got shape {x.shape}")


class CloverOrthogonalizer(BaseEstimator, TransformerMixin):
    """Rewrite attention weights as frozen orthonormal bases around small cores.

    Parameters
    ----------
    mode : "svd" or "qr"; qr keeps the query/key projections separable so
        rotary embeddings can apply between them.
    threshold_qk, threshold_vo : prune singular directions at or below
        these values after decomposing; ``None`` skips pruning.
    mask : "none" | "causal" | "window:W" applied in ``transform``.
    rope : apply rotary embeddings in ``transform`` (qr mode only).
    """

    def __init__(self, mode="svd", threshold_qk=None, threshold_vo=None,
                 mask="none", rope=False, rope_base=10000.0):
        self.mode = mode
        self.threshold_qk = threshold_qk
        self.threshold_vo = threshold_vo
        self.mask = mask
        self.rope = rope
        self.rope_base = rope_base

    def fit(self, weights, y=None):
        if not isinstance(weights, AttentionWeights):
            raise CloverError("fit expects an AttentionWeights instance")
        factors = decompose_factors(weights, mode=self.mode)
        self.prune_stats_ = None
        if self.threshold_qk is not None or self.threshold_vo is not None:
            factors, self.prune_stats_ = prune_factors(
                factors, self.threshold_qk or 0.0, self.threshold_vo or 0.0
            )
        self.factors_ = factors
        self.dims_ = weights.dims
        self.spectrum_ = spectrum_report(weights) if self.mode == "svd" else None
        return self

    def transform(self, X):
        self._check_fitted()
        x, batched = _as_batch(X, self.dims_[0])
        y = mha_forward_factored(x, self.factors_, self._mask_spec(), self._rope_spec())
        return y if batched else y[0]

    def merged_weights(self):
        """Plain four-matrix weights computing the same function."""
        self._check_fitted()
        return merge_back(self.factors_)

    def _mask_spec(self):
        return MaskSpec.parse(self.mask)

    def _rope_spec(self):
        return RopeSpec.on(self.rope_base) if self.rope else RopeSpec.off()

    def _check_fitted(self):
        if not hasattr(self, "factors_"):
            raise CloverError("this estimator is not fitted; call fit(weights) first")


class CloverFineTuner(BaseEstimator):
    """Gradient training of the cores with every basis frozen.

    ``factors`` is the starting :class:`CloverFactors` (typically from a
    fitted :class:`CloverOrthogonalizer`). ``fit(X, y)`` runs full-batch
    steps minimizing mean squared error of the factored forward against
    ``y``; only the singular-value cores (and upper-triangular factors in
    qr mode) move.
    """

    def __init__(self, factors=None, steps=200, lr=1e-2, optimizer="adam",
                 mask="none", rope=False, rope_base=10000.0, trainable="all"):
        self.factors = factors
        self.steps = steps
        self.lr = lr
        self.optimizer = optimizer
        self.mask = mask
        self.rope = rope
        self.rope_base = rope_base
        self.trainable = trainable

    def fit(self, X, y):
        if self.factors is None:
            raise CloverError("CloverFineTuner needs starting factors")
        x, _ = _as_batch(X, self.factors.dims[0])
        target = as_tensor(y, "y")
        if target.shape != x.shape:
            target = target[None, :, :] if target.ndim == 2 else target
        if target.shape != x.shape:
            raise CloverError(f"y shape {np.asarray(y).shape} does not match X shape {x.shape}")

        mask = MaskSpec.parse(self.mask)
        rope = RopeSpec.on(self.rope_base) if self.rope else RopeSpec.off()
        state = init_train_state(self.factors, trainable=self.trainable,
                                 optimizer=self.optimizer, lr=self.lr)
        for step in range(self.steps):
            current = state.current_factors()
            pred, cache = factored_forward_cached(x, current, mask, rope)
            loss, upstream = mse_loss(pred, target)
            grads = factored_backward(x, current, mask, rope, upstream, cache)
            grads = {name: grads[name] for name in state.trained_names}
            state.loss_history.append(loss)
            state.grad_norms.append(float(np.sqrt(sum(np.sum(g * g) for g in grads.values()))))
            _apply_update(state, grads)
            state.step += 1
        if frozen_checksum(self.factors, state.trained_names) != state.frozen_checksum:
            raise CloverError("frozen bases changed during fit")  # pragma: no cover
        self.state_ = state
        self.factors_ = state.current_factors()
        self.loss_history_ = list(state.loss_history)
        return self

    def predict(self, X):
        if not hasattr(self, "factors_"):
            raise CloverError("this estimator is not fitted; call fit(X, y) first")
        x, batched = _as_batch(X, self.factors_.dims[0])
        mask = MaskSpec.parse(self.mask)
        rope = RopeSpec.on(self.rope_base) if self.rope else RopeSpec.off()
        y = mha_forward_factored(x, self.factors_, mask, rope)
        return y if batched else y[0]

    def merged_weights(self):
        """Merge the trained cores back into plain weights."""
        if not hasattr(self, "factors_"):
            raise CloverError("this estimator is not fitted; call fit(X, y) first")
        return merge_back(self.factors_)
