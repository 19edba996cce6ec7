import numpy as np
import pytest

import clover.linalg as linalg
from clover.exceptions import ConvergenceError, ShapeError
from clover.linalg import householder_qr, jacobi_svd, orthonormality_error, product_svd
from clover.rng import make_rng
from clover.tensor import matmul


def power_iteration_eigs(gram, count, iters=6000):
    """Dominant eigenvalues of a symmetric PSD matrix by power iteration
    with deflation. Independent of any SVD code path."""
    work = gram.copy()
    n = gram.shape[0]
    eigs = []
    for j in range(count):
        v = np.full(n, 1.0 / np.sqrt(n)) + 1e-3 * make_rng(99, j).normal(size=n)
        v /= np.linalg.norm(v)
        for _ in range(iters):
            nxt = work @ v
            norm = np.linalg.norm(nxt)
            if norm == 0.0:
                break
            v = nxt / norm
        lam = float(v @ work @ v)
        eigs.append(lam)
        work = work - lam * np.outer(v, v)
    return np.array(eigs)


# ---------------------------------------------------------------- QR


def test_qr_identity():
    fac = householder_qr(np.eye(4))
    np.testing.assert_array_equal(fac.q, np.eye(4))
    np.testing.assert_array_equal(fac.r, np.eye(4))


def test_qr_scaled_identity_nonneg_diag():
    fac = householder_qr(2.0 * np.eye(3))
    np.testing.assert_array_equal(fac.q, np.eye(3))
    np.testing.assert_array_equal(fac.r, 2.0 * np.eye(3))
    assert (np.diag(fac.r) >= 0).all()


@pytest.mark.parametrize("seed", range(10))
def test_qr_random_reconstruction(seed):
    a = make_rng(10, seed).normal(size=(8, 3))
    fac = householder_qr(a)
    assert orthonormality_error(fac.q) <= 1e-12
    recon = fac.reconstruct()
    assert np.linalg.norm(recon - a) / np.linalg.norm(a) <= 1e-12
    assert (np.diag(fac.r) >= 0).all()
    # exact zeros below the diagonal
    assert (fac.r[np.tril_indices(3, k=-1)] == 0.0).all()


def test_qr_rejects_wide():
    with pytest.raises(ShapeError):
        householder_qr(np.zeros((2, 5)))


def test_qr_rank_deficient_column():
    a = make_rng(11).normal(size=(6, 3))
    a[:, 1] = 2.0 * a[:, 0]
    fac = householder_qr(a)
    recon = fac.reconstruct()
    assert np.linalg.norm(recon - a) / np.linalg.norm(a) <= 1e-12


# ---------------------------------------------------------------- SVD


def test_jacobi_diagonal_input():
    fac = jacobi_svd(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_array_equal(fac.s, [3.0, 2.0, 1.0])
    np.testing.assert_array_equal(fac.u, np.eye(3))
    np.testing.assert_array_equal(fac.v, np.eye(3))


def test_jacobi_rank_one_outer_product():
    rng = make_rng(12)
    x = rng.normal(size=5)
    x *= 2.0 / np.linalg.norm(x)
    y = rng.normal(size=4)
    y *= 5.0 / np.linalg.norm(y)
    fac = jacobi_svd(np.outer(x, y))
    # analytic: sole singular value is ||x|| * ||y|| = 10
    np.testing.assert_allclose(fac.s[0], 10.0, rtol=1e-12)
    assert (fac.s[1:] <= 1e-12).all()
    assert orthonormality_error(fac.u) <= 1e-12
    assert orthonormality_error(fac.v.T) <= 1e-12


@pytest.mark.parametrize("seed", range(8))
def test_jacobi_random_reconstruction_and_eig_oracle(seed):
    a = make_rng(13, seed).normal(size=(6, 6))
    fac = jacobi_svd(a)
    recon = fac.reconstruct()
    assert np.linalg.norm(recon - a) / np.linalg.norm(a) <= 1e-11
    assert orthonormality_error(fac.u) <= 1e-12
    assert orthonormality_error(fac.v.T) <= 1e-12
    assert (np.diff(fac.s) <= 0).all() and (fac.s >= 0).all()
    eigs = power_iteration_eigs(a.T @ a, count=6)
    np.testing.assert_allclose(fac.s**2, eigs, rtol=1e-8)


@pytest.mark.parametrize("shape", [(6, 6), (8, 3), (3, 8), (5, 1)])
def test_jacobi_energy_conservation(shape):
    a = make_rng(14, shape[0], shape[1]).normal(size=shape)
    fac = jacobi_svd(a)
    fro_sq = float(np.sum(a * a))
    assert abs(fro_sq - float(np.sum(fac.s**2))) / fro_sq <= 1e-10


def test_jacobi_wide_matrix_shapes():
    a = make_rng(15).normal(size=(3, 8))
    fac = jacobi_svd(a)
    assert fac.u.shape == (3, 3)
    assert fac.s.shape == (3,)
    assert fac.v.shape == (3, 8)
    assert np.linalg.norm(fac.reconstruct() - a) / np.linalg.norm(a) <= 1e-11


def test_jacobi_zero_matrix_convention():
    fac = jacobi_svd(np.zeros((5, 3)))
    np.testing.assert_array_equal(fac.s, np.zeros(3))
    np.testing.assert_array_equal(fac.u, np.eye(5, 3))
    np.testing.assert_array_equal(fac.v, np.eye(3, 3))


def test_jacobi_sign_convention():
    for seed in range(5):
        fac = jacobi_svd(make_rng(16, seed).normal(size=(7, 4)))
        for j in range(4):
            col = fac.u[:, j]
            nz = np.flatnonzero(col)
            assert col[nz[0]] >= 0


def test_jacobi_deterministic():
    a = make_rng(17).normal(size=(9, 5))
    f1 = jacobi_svd(a)
    f2 = jacobi_svd(a)
    assert np.array_equal(f1.u, f2.u)
    assert np.array_equal(f1.s, f2.s)
    assert np.array_equal(f1.v, f2.v)


def test_jacobi_nonconvergence_reports_residual(monkeypatch):
    monkeypatch.setattr(linalg, "_JACOBI_MAX_SWEEPS", 1)
    a = make_rng(18).normal(size=(12, 12))
    with pytest.raises(ConvergenceError) as excinfo:
        jacobi_svd(a)
    assert "off-diagonal" in str(excinfo.value)


# ---------------------------------------------------------------- product SVD


def test_product_svd_orthonormal_slab():
    D, d = 12, 4
    a = np.eye(D, d)
    fac = product_svd(a, a.T)
    np.testing.assert_allclose(fac.s, np.ones(d), atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_product_svd_matches_explicit_product(seed):
    rng = make_rng(19, seed)
    a = rng.normal(size=(32, 4))
    b = rng.normal(size=(4, 32))
    fac = product_svd(a, b)
    explicit = matmul(a, b)
    recon = fac.reconstruct()
    assert np.linalg.norm(recon - explicit) / np.linalg.norm(explicit) <= 1e-11
    assert orthonormality_error(fac.u) <= 1e-11
    assert orthonormality_error(fac.v.T) <= 1e-11


def test_product_svd_rank_bound_vs_explicit_svd():
    rng = make_rng(20)
    a = rng.normal(size=(32, 4))
    b = rng.normal(size=(4, 32))
    fac = product_svd(a, b)
    full = jacobi_svd(matmul(a, b))
    np.testing.assert_allclose(fac.s, full.s[:4], atol=1e-10)
    assert (full.s[4:] <= 1e-12).all()


def test_product_svd_rejects_fat_inner():
    with pytest.raises(ShapeError):
        product_svd(np.zeros((3, 5)), np.zeros((5, 3)))


@pytest.mark.parametrize("seed", range(12))
def test_product_svd_agreement_sweep(seed):
    rng = make_rng(21, seed)
    D = int(rng.integers(4, 65))
    d = int(rng.integers(1, min(17, D + 1)))
    a = rng.normal(size=(D, d)) / np.sqrt(D)
    b = rng.normal(size=(d, D)) / np.sqrt(D)
    fac = product_svd(a, b)
    full = jacobi_svd(matmul(a, b))
    np.testing.assert_allclose(fac.s, full.s[:d], atol=1e-10)
    assert np.linalg.norm(fac.reconstruct() - full.reconstruct()) <= 1e-10


# ---------------------------------------------------------------- misc


def test_orthonormality_error_trivials():
    assert orthonormality_error(np.eye(5)) == 0.0
    assert orthonormality_error(2.0 * np.eye(3)) == 3.0
    q = householder_qr(make_rng(22).normal(size=(10, 4))).q
    assert orthonormality_error(q) <= 1e-12
    with pytest.raises(ShapeError):
        orthonormality_error(np.zeros((2, 4)))
