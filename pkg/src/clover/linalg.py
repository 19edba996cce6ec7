"""Dense decompositions: Householder QR, one-sided Jacobi SVD, product SVD.

One-sided Jacobi is used instead of bidiagonalization because it keeps
high relative accuracy on tiny singular values, and pruning decisions
downstream hinge on telling exact-zero directions from small-but-real
ones. Sign conventions are fixed (nonnegative R diagonal; first nonzero
entry of each left singular vector nonnegative) so factorizations are
unique and comparisons deterministic.
"""

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConvergenceError, ShapeError
from .tensor import matmul
from .validation import as_tensor

__all__ = [
    "QRFactors",
    "SVDFactors",
    "householder_qr",
    "jacobi_svd",
    "product_svd",
    "orthonormality_error",
]

# Off-diagonal Gram entries below this (relative) level count as annihilated.
_JACOBI_TOL = 1e-14
_JACOBI_MAX_SWEEPS = 60


@dataclass(frozen=True)
class QRFactors:
    """Thin QR: q has orthonormal columns, r is upper triangular with diag(r) >= 0."""

    q: np.ndarray  # (m, n)
    r: np.ndarray  # (n, n)

    def reconstruct(self):
        return matmul(self.q, self.r)


@dataclass(frozen=True)
class SVDFactors:
    """Thin SVD: u (m, r) orthonormal columns, s (r,) nonincreasing >= 0, v (r, n) orthonormal rows."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def rank(self):
        return self.s.shape[0]

    def reconstruct(self):
        return matmul(self.u * self.s[None, :], self.v)


def orthonormality_error(q):
    """Max-abs entry of qᵀq - I for a tall (m >= n) matrix."""
    q = as_tensor(q, "q", ndim=2, allow_empty=True)
    m, n = q.shape
    if m < n:
        raise ShapeError(f"orthonormality_error: need m >= n, got {q.shape}")
    if n == 0:
        return 0.0
    gram = q.T @ q
    return float(np.max(np.abs(gram - np.eye(n))))


def householder_qr(a):
    """Thin QR of a tall matrix by Householder reflections.

    Requires m >= n. The below-diagonal triangle of r is exactly zero and
    diag(r) is nonnegative (columns of q flip sign where needed).
    """
    a = as_tensor(a, "a", ndim=2)
    m, n = a.shape
    if m < n:
        raise ShapeError(f"householder_qr: need m >= n, got {a.shape}")

    r = a.copy()
    reflectors = []
    for k in range(n):
        x = r[k:, k]
        norm = math.sqrt(float(x @ x))
        if norm == 0.0:
            reflectors.append(None)
            continue
        v = x.copy()
        v[0] += math.copysign(norm, x[0])
        vsq = float(v @ v)
        if vsq == 0.0:
            reflectors.append(None)
            continue
        r[k:, k:] -= np.outer(v, (2.0 / vsq) * (v @ r[k:, k:]))
        reflectors.append((v, vsq))
    r = np.triu(r[:n, :])

    q = np.eye(m, n)
    for k in range(n - 1, -1, -1):
        ref = reflectors[k]
        if ref is None:
            continue
        v, vsq = ref
        q[k:, :] -= np.outer(v, (2.0 / vsq) * (v @ q[k:, :]))

    flip = np.diag(r) < 0.0
    if flip.any():
        r[flip, :] *= -1.0
        q[:, flip] *= -1.0
    return QRFactors(q=q, r=r)


def _complete_basis(u, need_cols):
    """Fill zero columns of u with unit vectors orthogonal to the rest.

    Deterministic: scans identity vectors in order and keeps the residual
    with the largest norm after Gram-Schmidt against the columns already
    present (stopping early once a residual is clearly independent).
    """
    m = u.shape[0]
    live = [u[:, j].copy() for j in range(u.shape[1]) if j not in need_cols]
    for j in need_cols:
        best, best_norm = None, -1.0
        for basis_idx in range(m):
            cand = np.zeros(m)
            cand[basis_idx] = 1.0
            for col in live:
                cand -= (col @ cand) * col
            norm = math.sqrt(float(cand @ cand))
            if norm > best_norm:
                best, best_norm = cand, norm
            if norm > 0.9:
                break
        # second pass cleans up cancellation when the best residual is small
        for col in live:
            best -= (col @ best) * col
        best /= math.sqrt(float(best @ best))
        u[:, j] = best
        live.append(best)
    return u


def _sign_normalize(u, v):
    """First nonzero entry of each u column >= 0; v rows flipped to match."""
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(col)
        if nz.size and col[nz[0]] < 0.0:
            u[:, j] = -col
            v[j, :] = -v[j, :]
    return u, v


def jacobi_svd(a):
    """Thin SVD by cyclic one-sided Jacobi rotations.

    Plane rotations on column pairs of a working copy run until every
    off-diagonal Gram entry satisfies |g_ij| <= 1e-14 * sqrt(g_ii * g_jj);
    column norms become s, normalized columns u, accumulated rotations v.
    Intended for small matrices (extents up to a few hundred).
    """
    a = as_tensor(a, "a", ndim=2)
    m, n = a.shape
    if m < n:
        inner = jacobi_svd(a.T)
        u, v = _sign_normalize(inner.v.T.copy(), inner.u.T.copy())
        return SVDFactors(u=u, s=inner.s.copy(), v=v)

    work = a.copy()
    vt = np.eye(n)
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                cp = work[:, p]
                cq = work[:, q]
                gpp = float(cp @ cp)
                gqq = float(cq @ cq)
                gpq = float(cp @ cq)
                if abs(gpq) <= _JACOBI_TOL * math.sqrt(gpp * gqq):
                    continue
                zeta = (gqq - gpp) / (2.0 * gpq)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * cp - s * cq
                new_q = s * cp + c * cq
                work[:, p] = new_p
                work[:, q] = new_q
                vp = vt[:, p].copy()
                vq = vt[:, q].copy()
                vt[:, p] = c * vp - s * vq
                vt[:, q] = s * vp + c * vq
                rotated = True
        if not rotated:
            break
    else:
        residual = _max_offdiag_ratio(work)
        raise ConvergenceError(
            f"jacobi_svd: no convergence after {_JACOBI_MAX_SWEEPS} sweeps "
            f"(max off-diagonal ratio {residual:.3e})"
        )

    norms = np.sqrt(np.sum(work * work, axis=0))
    order = np.argsort(-norms, kind="stable")
    norms = norms[order]
    work = work[:, order]
    vt = vt[:, order]

    u = np.zeros((m, n))
    dead = []
    for j in range(n):
        if norms[j] > 0.0:
            u[:, j] = work[:, j] / norms[j]
        else:
            dead.append(j)
    if dead:
        u = _complete_basis(u, dead)
    v = vt.T
    u, v = _sign_normalize(u, v)
    return SVDFactors(u=u, s=norms, v=v)


def _max_offdiag_ratio(work):
    gram = work.T @ work
    d = np.sqrt(np.diag(gram))
    denom = np.outer(d, d)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.abs(gram) / denom
    np.fill_diagonal(ratio, 0.0)
    return float(np.nanmax(ratio))


def product_svd(a, b):
    """Thin SVD of a @ b without forming the large product.

    For a (M, d) and b (d, N) with d <= min(M, N): QR of a, QR of bᵀ, a
    d-by-d Jacobi SVD of the small core, then the orthogonal factors are
    folded back in. Rank of the result equals d.
    """
    a = as_tensor(a, "a", ndim=2)
    b = as_tensor(b, "b", ndim=2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"product_svd: inner extents differ, {a.shape} x {b.shape}")
    d = a.shape[1]
    if d > a.shape[0] or d > b.shape[1]:
        raise ShapeError(
            f"product_svd: inner extent {d} must not exceed outer extents "
            f"{a.shape[0]} and {b.shape[1]}"
        )
    qa = householder_qr(a)
    qb = householder_qr(b.T)
    core = jacobi_svd(matmul(qa.r, qb.r.T))
    u = matmul(qa.q, core.u)
    v = matmul(core.v, qb.q.T)
    return SVDFactors(u=u, s=core.s, v=v)
