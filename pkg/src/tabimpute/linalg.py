"""Thin SVD and hard-threshold low-rank reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError

__all__ = ["SvdFactors", "svd", "jacobi_svd", "hard_threshold_reconstruct"]

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-10


@dataclass(frozen=True)
class SvdFactors:
    """``A = U @ diag(S) @ V.T`` with ``k = min(n, d)`` columns."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def rank_above(self, lam: float) -> int:
        return int(np.count_nonzero(self.S > lam))


def _fix_signs(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # largest-magnitude entry of each U column made positive (first one on ties)
    if U.size == 0:
        return U, V
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[idx, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    return U * signs, V * signs


def svd(A: np.ndarray, method: str = "lapack") -> SvdFactors:
    """Thin singular value decomposition with a deterministic sign convention.

    Args:
        A: finite real matrix, n x d.
        method: ``"lapack"`` (divide-and-conquer via numpy) or ``"jacobi"``
            (one-sided Jacobi rotations, pure numpy).

    Raises:
        ConvergenceError: the solver did not converge.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or min(A.shape) < 1:
        raise ValueError(f"svd expects a non-empty 2-D matrix, got shape {A.shape}")
    if not np.isfinite(A).all():
        raise ValueError("svd input contains non-finite values")
    if method == "jacobi":
        return jacobi_svd(A)
    if method != "lapack":
        raise ValueError(f"unknown svd method {method!r}")
    try:
        U, S, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"SVD did not converge: {exc}") from exc
    U, V = _fix_signs(U, Vt.T)
    return SvdFactors(U, S, V)


def _complete_basis(Q: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Replace the unfilled columns of Q with unit vectors orthogonal to the rest."""
    n = Q.shape[0]
    Q = Q.copy()
    e = 0
    for j in np.flatnonzero(~filled):
        while True:
            v = np.zeros(n)
            v[e % n] = 1.0
            e += 1
            basis = Q[:, filled]
            for _ in range(2):
                v -= basis @ (basis.T @ v)
            nv = np.linalg.norm(v)
            if nv > 1e-6:
                break
            if e > 2 * n:
                raise ConvergenceError("could not complete orthonormal basis")
        Q[:, j] = v / nv
        filled = filled.copy()
        filled[j] = True
    return Q


def jacobi_svd(A: np.ndarray) -> SvdFactors:
    """One-sided (Hestenes) Jacobi SVD.

    Columns of a working copy are rotated pairwise until every pair is
    orthogonal to ``JACOBI_TOL`` relative to the product of their norms.
    """
    A = np.asarray(A, dtype=np.float64)
    transposed = A.shape[0] < A.shape[1]
    W = A.T.copy() if transposed else A.copy()
    n, d = W.shape
    V = np.eye(d)
    for _ in range(JACOBI_MAX_SWEEPS):
        rotated = False
        for p in range(d - 1):
            for q in range(p + 1, d):
                wp, wq = W[:, p], W[:, q]
                alpha = wp @ wp
                beta = wq @ wq
                gamma = wp @ wq
                if abs(gamma) <= JACOBI_TOL * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                W[:, [p, q]] = np.column_stack((c * wp - s * wq, s * wp + c * wq))
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise ConvergenceError(f"Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps")

    S = np.linalg.norm(W, axis=0)
    order = np.argsort(-S, kind="stable")
    S, W, V = S[order], W[:, order], V[:, order]
    tiny = S <= (S[0] if S.size else 0.0) * 1e-15 * max(n, d)
    S = np.where(tiny, 0.0, S)
    U = np.zeros_like(W)
    U[:, ~tiny] = W[:, ~tiny] / S[~tiny]
    if tiny.any():
        U = _complete_basis(U, ~tiny)
    if transposed:
        U, V = V, U
    U, V = _fix_signs(U, V)
    return SvdFactors(U, S, V)


def hard_threshold_reconstruct(f: SvdFactors, lam: float) -> np.ndarray:
    """Rebuild the matrix keeping only singular values strictly greater than ``lam``."""
    if lam < 0:
        raise ValueError("threshold must be non-negative")
    keep = f.S > lam
    if not keep.any():
        return np.zeros((f.U.shape[0], f.V.shape[0]))
    return (f.U[:, keep] * f.S[keep]) @ f.V[:, keep].T
