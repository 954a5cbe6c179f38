"""Thin SVD of small matrices.

The default backend is LAPACK's ``gesvd`` (Householder bidiagonalization
followed by implicit-shift QR on the bidiagonal). A batched one-sided Jacobi
implementation is kept as an independent second backend: every matrix in a
batch is oriented tall, zero-padded to a common shape and rotated together.
Zero padding never mixes with real columns because a pair involving a zero
column has zero inner product and is skipped.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.linalg

from ..errors import NumericalError


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Disjoint column pairings covering every pair once per sweep (circle method)."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        if p:
            rounds.append((np.array(p), np.array(q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return tuple(rounds)


def jacobi_svd_batch(A: np.ndarray, max_sweeps: int | None = None, tol: float | None = None):
    """SVD of a stack of tall matrices ``A`` with shape (B, R, C), R >= C.

    Returns (U, s, V) with U (B, R, C), s (B, C) descending, V (B, C, C) such
    that ``A[b] = U[b] @ diag(s[b]) @ V[b].T``. Computation is float64.
    """
    A = np.array(A, dtype=np.float64, copy=True)
    B, R, C = A.shape
    if R < C:
        raise ValueError("jacobi_svd_batch expects tall matrices")
    if tol is None:
        tol = max(R, 1) * np.finfo(np.float64).eps
    if max_sweeps is None:
        max_sweeps = 100 * max(C, 1)
    V = np.broadcast_to(np.eye(C), (B, C, C)).copy()
    rounds = _round_robin(C)
    converged = C < 2
    off = 0.0
    for _ in range(max_sweeps):
        if converged:
            break
        off = 0.0
        for p, q in rounds:
            ap = A[:, :, p]
            aq = A[:, :, q]
            alpha = np.einsum("brk,brk->bk", ap, ap)
            beta = np.einsum("brk,brk->bk", aq, aq)
            gamma = np.einsum("brk,brk->bk", ap, aq)
            scale = np.sqrt(alpha * beta)
            active = np.abs(gamma) > tol * scale
            if not active.any():
                continue
            ratio = np.abs(gamma[active]) / scale[active]
            off = max(off, float(ratio.max()))
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)
            c3, s3 = c[:, None, :], s[:, None, :]
            A[:, :, p] = c3 * ap - s3 * aq
            A[:, :, q] = s3 * ap + c3 * aq
            vp = V[:, :, p]
            vq = V[:, :, q]
            V[:, :, p] = c3 * vp - s3 * vq
            V[:, :, q] = s3 * vp + c3 * vq
        converged = off <= tol
    if not converged:
        norms = np.sqrt((A * A).sum(axis=(1, 2)))
        raise NumericalError(
            f"Jacobi SVD did not converge in {max_sweeps} sweeps "
            f"(max off-diagonal ratio {off:.3e}); Frobenius norms {np.array2string(norms, precision=4)}"
        )
    s = np.sqrt(np.einsum("brc,brc->bc", A, A))
    order = np.argsort(-s, axis=1, kind="stable")
    s = np.take_along_axis(s, order, axis=1)
    A = np.take_along_axis(A, order[:, None, :], axis=2)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    safe = np.where(s > 0, s, 1.0)
    U = np.where(s[:, None, :] > 0, A / safe[:, None, :], 0.0)
    return U, s, V


BACKENDS = ("gesvd", "jacobi")


def _gesvd(M: np.ndarray):
    try:
        u, s, vt = scipy.linalg.svd(M, full_matrices=False, lapack_driver="gesvd", check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"SVD did not converge for a {M.shape[0]}x{M.shape[1]} matrix "
            f"(Frobenius norm {np.linalg.norm(M):.4e}, max |entry| {np.abs(M).max():.4e}): {exc}"
        ) from exc
    return u, s, vt.T


def thin_svd_many(mats: Sequence[np.ndarray], backend: str = "gesvd"):
    """Thin SVD of arbitrarily shaped matrices.

    Returns a list of (U m*k, s k, V n*k) with k = min(m, n) and s descending.
    """
    if backend not in BACKENDS:
        raise ValueError(f"unknown SVD backend {backend!r}; choose from {BACKENDS}")
    checked = []
    for M in mats:
        M = np.asarray(M, dtype=np.float64)
        if M.ndim != 2 or min(M.shape) < 1:
            raise ValueError(f"expected a non-empty matrix, got shape {M.shape}")
        if not np.all(np.isfinite(M)):
            raise NumericalError("SVD input contains non-finite values")
        checked.append(M)
    if backend == "gesvd":
        return [_gesvd(M) for M in checked]
    if not checked:
        return []
    oriented = [(M.T, True) if M.shape[0] < M.shape[1] else (M, False) for M in checked]
    R = max(M.shape[0] for M, _ in oriented)
    C = max(M.shape[1] for M, _ in oriented)
    stack = np.zeros((len(mats), R, C))
    for i, (M, _) in enumerate(oriented):
        stack[i, : M.shape[0], : M.shape[1]] = M
    U, s, V = jacobi_svd_batch(stack)
    out = []
    for i, (M, flipped) in enumerate(oriented):
        r, c = M.shape
        k = c
        u, sv, v = U[i, :r, :k], s[i, :k], V[i, :c, :k]
        out.append((v, sv, u) if flipped else (u, sv, v))
    return out
