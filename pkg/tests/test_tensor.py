import numpy as np
import pytest

from clover.exceptions import MaskError, ShapeError
from clover.masks import MaskSpec
from clover.rng import make_rng
from clover.tensor import matmul, softmax_rows


def matmul_oracle(a, b):
    """Naive triple loop; the reference accumulation order."""
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for kk in range(k):
                acc += a[i, kk] * b[kk, j]
            out[i, j] = acc
    return out


def test_matmul_identity():
    a = make_rng(0).normal(size=(3, 3))
    assert np.array_equal(matmul(np.eye(3), a), a)


def test_matmul_annihilator():
    a = make_rng(1).normal(size=(4, 3))
    assert np.array_equal(matmul(a, np.zeros((3, 5))), np.zeros((4, 5)))


def test_matmul_matches_triple_loop_exactly():
    rng = make_rng(2)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3, 5))
    assert np.array_equal(matmul(a, b), matmul_oracle(a, b))


@pytest.mark.parametrize("seed", range(20))
def test_matmul_triple_loop_property(seed):
    rng = make_rng(3, seed)
    m, k, n = rng.integers(1, 9, size=3)
    a = rng.normal(size=(m, k))
    b = rng.normal(size=(k, n))
    assert np.array_equal(matmul(a, b), matmul_oracle(a, b))


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError) as excinfo:
        matmul(np.zeros((2, 3)), np.zeros((4, 5)))
    assert "(2, 3)" in str(excinfo.value) and "(4, 5)" in str(excinfo.value)


def test_matmul_rejects_non_finite():
    bad = np.array([[np.nan, 1.0]])
    with pytest.raises(ShapeError):
        matmul(bad, np.zeros((2, 2)))


@pytest.mark.parametrize("seed", range(10))
def test_matmul_associativity(seed):
    rng = make_rng(4, seed)
    a = rng.normal(size=(5, 4))
    b = rng.normal(size=(4, 6))
    c = rng.normal(size=(6, 3))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    rel = np.linalg.norm(left - right) / np.linalg.norm(left)
    assert rel <= 1e-9


def test_softmax_uniform_row():
    out = softmax_rows(np.zeros((1, 4)))
    assert np.allclose(out, 0.25, atol=0)
    np.testing.assert_array_equal(out, np.full((1, 4), 0.25))


def test_softmax_large_equal_logits_with_mask():
    grid = np.array([[True, True, False, False]] * 4)
    logits = np.full((4, 4), 1000.0)
    out = softmax_rows(logits, MaskSpec.explicit(grid))
    np.testing.assert_array_equal(out[0], [0.5, 0.5, 0.0, 0.0])


def test_softmax_causal_first_row_single_key():
    rng = make_rng(5)
    logits = rng.normal(size=(2, 6, 6))
    out = softmax_rows(logits, MaskSpec.causal())
    np.testing.assert_array_equal(out[:, 0, 0], [1.0, 1.0])
    np.testing.assert_array_equal(out[:, 0, 1:], np.zeros((2, 5)))


@pytest.mark.parametrize("mask", [None, MaskSpec.causal(), MaskSpec.sliding_window(3)])
def test_softmax_rows_sum_to_one(mask):
    rng = make_rng(6)
    logits = rng.normal(size=(3, 8, 8)) * 50
    out = softmax_rows(logits, mask)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12, rtol=0)
    assert (out >= 0).all()


def test_softmax_shift_invariance():
    rng = make_rng(7)
    logits = rng.normal(size=(4, 5, 5))
    shift = rng.normal(size=(4, 5, 1)) * 100
    base = softmax_rows(logits)
    shifted = softmax_rows(logits + shift)
    rel = np.abs(base - shifted) / np.maximum(np.abs(base), 1e-300)
    assert rel.max() <= 1e-12


def test_softmax_empty_row_identifies_row():
    grid = np.ones((3, 3), dtype=bool)
    grid[1] = False
    with pytest.raises(MaskError) as excinfo:
        MaskSpec.explicit(grid)
    assert "row 1" in str(excinfo.value)


def test_softmax_masked_positions_exactly_zero():
    rng = make_rng(8)
    logits = rng.normal(size=(6, 6))
    out = softmax_rows(logits, MaskSpec.sliding_window(2))
    allowed = MaskSpec.sliding_window(2).allowed(6)
    assert (out[~allowed] == 0.0).all()


def test_mask_parse_roundtrip():
    for text in ("none", "causal", "window:4"):
        assert MaskSpec.parse(text).describe() == text
    with pytest.raises(MaskError):
        MaskSpec.parse("diagonal")
    with pytest.raises(MaskError):
        MaskSpec.sliding_window(0)


def test_rng_bit_identical_stream():
    a = make_rng(42, 7).normal(size=32)
    b = make_rng(42, 7).normal(size=32)
    assert np.array_equal(a, b)
    c = make_rng(42, 8).normal(size=32)
    assert not np.array_equal(a, c)
