import numpy as np
import pytest
from sklearn.base import clone

from clover.attention import mha_forward, mha_forward_factored
from clover.estimators import CloverFineTuner, CloverOrthogonalizer
from clover.exceptions import CloverError
from clover.finetune import make_toy_task, task_batch, teacher_factors
from clover.masks import MaskSpec
from clover.synth import low_rank_weights, random_inputs, random_weights
from clover.transform import decompose_factors


def test_orthogonalizer_params_round_trip():
    est = CloverOrthogonalizer(mode="qr", mask="causal", rope=True)
    params = est.get_params()
    assert params["mode"] == "qr" and params["rope"] is True
    cloned = clone(est)
    assert cloned.get_params() == params
    cloned.set_params(mode="svd", rope=False)
    assert cloned.mode == "svd"


def test_orthogonalizer_transform_matches_functional_path():
    w = random_weights(16, 2, 4, seed=160, bias=True)
    est = CloverOrthogonalizer(mask="causal").fit(w)
    x = random_inputs(2, 6, 16, seed=161)
    got = est.transform(x)
    want = mha_forward_factored(x, decompose_factors(w), MaskSpec.causal())
    assert np.array_equal(got, want)
    # and reproduces the plain attention function
    assert np.max(np.abs(got - mha_forward(x, w, MaskSpec.causal()))) <= 1e-10


def test_orthogonalizer_2d_input():
    w = random_weights(8, 2, 4, seed=162)
    est = CloverOrthogonalizer().fit(w)
    x = random_inputs(1, 5, 8, seed=163)
    out = est.transform(x[0])
    assert out.shape == (5, 8)
    np.testing.assert_array_equal(out, est.transform(x)[0])


def test_orthogonalizer_pruning_stats():
    w = low_rank_weights(16, 2, 8, rank=4, seed=164)
    est = CloverOrthogonalizer(threshold_qk=1e-9, threshold_vo=1e-9).fit(w)
    assert est.prune_stats_ is not None
    assert est.prune_stats_.per_head_rank_qk == [4, 4]
    x = random_inputs(2, 5, 16, seed=165)
    assert np.max(np.abs(est.transform(x) - mha_forward(x, w))) <= 1e-10


def test_orthogonalizer_merged_weights():
    w = random_weights(12, 2, 4, seed=166)
    est = CloverOrthogonalizer().fit(w)
    merged = est.merged_weights()
    x = random_inputs(2, 5, 12, seed=167)
    assert np.max(np.abs(mha_forward(x, merged) - mha_forward(x, w))) <= 1e-10


def test_orthogonalizer_qr_rope_transform():
    w = random_weights(12, 2, 4, seed=168)
    est = CloverOrthogonalizer(mode="qr", mask="causal", rope=True).fit(w)
    x = random_inputs(2, 6, 12, seed=169)
    from clover.attention import RopeSpec

    want = mha_forward(x, w, MaskSpec.causal(), RopeSpec.on())
    assert np.max(np.abs(est.transform(x) - want)) <= 1e-10


def test_orthogonalizer_rejects_unfitted_and_bad_input():
    est = CloverOrthogonalizer()
    with pytest.raises(CloverError):
        est.transform(np.zeros((3, 8)))
    with pytest.raises(CloverError):
        est.fit(np.zeros((8, 2, 4)))


def test_finetuner_recovers_teacher():
    w = random_weights(16, 2, 4, seed=170)
    f = decompose_factors(w)
    task = make_toy_task("sequence-regression", 7, (4, 8, 16))
    batch = task_batch(task, 0, f=f)
    tuner = CloverFineTuner(factors=f, steps=300, lr=1e-2)
    tuner.fit(batch.x, batch.y)
    assert tuner.loss_history_[-1] <= 0.05 * tuner.loss_history_[0]
    pred = tuner.predict(batch.x)
    assert np.mean((pred - batch.y) ** 2) <= 0.05 * tuner.loss_history_[0]


def test_finetuner_merged_weights_preserve_function():
    w = random_weights(12, 2, 4, seed=171)
    f = decompose_factors(w)
    task = make_toy_task("sequence-regression", 13, (2, 6, 12))
    batch = task_batch(task, 0, f=f)
    tuner = CloverFineTuner(factors=f, steps=60, lr=1e-2).fit(batch.x, batch.y)
    merged = tuner.merged_weights()
    x = random_inputs(2, 6, 12, seed=172)
    assert np.max(np.abs(mha_forward(x, merged) - tuner.predict(x))) <= 1e-10


def test_finetuner_requires_factors_and_fit():
    tuner = CloverFineTuner()
    with pytest.raises(CloverError):
        tuner.fit(np.zeros((1, 4, 8)), np.zeros((1, 4, 8)))
    w = random_weights(8, 2, 4, seed=173)
    tuner = CloverFineTuner(factors=decompose_factors(w))
    with pytest.raises(CloverError):
        tuner.predict(np.zeros((1, 4, 8)))
    with pytest.raises(CloverError):
        tuner.fit(np.zeros((1, 4, 8)), np.zeros((1, 5, 8)))


def test_finetuner_clone_keeps_factors_param():
    w = random_weights(8, 2, 4, seed=174)
    f = decompose_factors(w)
    tuner = CloverFineTuner(factors=f, steps=3)
    cloned = clone(tuner)  # deep-copies plain params, including the factors
    assert cloned.steps == 3
    np.testing.assert_array_equal(cloned.factors.u_qk, f.u_qk)
    np.testing.assert_array_equal(cloned.factors.s_vo, f.s_vo)
