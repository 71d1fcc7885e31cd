"""Rank-truncated design factors and Woodbury-identity solves.

The design matrix X (n x (p+1)) is replaced by its top-l SVD factors. Ridge
systems (X'WX + Sigma^-1)^-1 rhs are then solved through an l x l core via
the Kailath variant of the Woodbury identity, so only small factorizations
are ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from spatialboost.errors import ConfigurationError, NumericalError

# diagonal jitter escalation (relative to the mean diagonal) before a Gram
# matrix is declared indefinite
JITTERS = (0.0, 1e-10, 1e-8, 1e-6)


@dataclass(frozen=True)
class TruncatedDesign:
    """Top-l SVD factors of the design matrix.

    U: n x l orthonormal, d: l non-increasing positive singular values,
    V: (p+1) x l orthonormal. ``frobenius_mse`` is the truncation residual
    ||X - U diag(d) V'||_F / (n (p+1)).
    """

    U: np.ndarray
    d: np.ndarray
    V: np.ndarray
    frobenius_mse: float

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def p1(self) -> int:
        return self.V.shape[0]

    @property
    def rank(self) -> int:
        return self.d.size

    def matvec(self, beta: np.ndarray) -> np.ndarray:
        """X beta through the factors."""
        return self.U @ (self.d * (self.V.T @ beta))

    def rmatvec(self, r: np.ndarray) -> np.ndarray:
        """X' r through the factors."""
        return self.V @ (self.d * (self.U.T @ r))

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.d) @ self.V.T


def _signed_svd(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD with a deterministic sign convention: the first entry of each
    right singular vector with magnitude above 1e-12 is made positive."""
    U, s, Vt = np.linalg.svd(np.asarray(X, dtype=float), full_matrices=False)
    V = Vt.T
    for k in range(V.shape[1]):
        col = V[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            V[:, k] = -col
            U[:, k] = -U[:, k]
    return U, s, V


def select_rank(X: np.ndarray, tol: float = 0.01) -> int:
    """Smallest l with ||X - X_l||_F / (n (p+1)) < tol (always >= 1)."""
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        raise ConfigurationError("empty design matrix")
    if tol <= 0 or not np.isfinite(tol):
        raise ConfigurationError(f"tol must be positive and finite, got {tol}")
    n, p1 = X.shape
    s = np.linalg.svd(X, compute_uv=False)
    tail = np.sqrt(np.maximum(np.cumsum(s[::-1] ** 2)[::-1], 0.0))
    scale = n * p1
    for l in range(1, s.size + 1):
        resid = tail[l] if l < s.size else 0.0
        if resid / scale < tol:
            return l
    return s.size


def truncate_design(X: np.ndarray, l: int) -> TruncatedDesign:
    """Optimal rank-l factorization of X with deterministic signs."""
    X = np.asarray(X, dtype=float)
    n, p1 = X.shape
    if not 1 <= l <= min(n, p1):
        raise ConfigurationError(f"rank l={l} outside [1, {min(n, p1)}]")
    U, s, V = _signed_svd(X)
    resid = float(np.sqrt(np.sum(s[l:] ** 2)))
    return TruncatedDesign(
        U=np.ascontiguousarray(U[:, :l]),
        d=s[:l].copy(),
        V=np.ascontiguousarray(V[:, :l]),
        frobenius_mse=resid / (n * p1),
    )


def _chol_with_jitter(G: np.ndarray, context: str):
    scale = max(float(np.mean(np.diag(G))), np.finfo(float).tiny)
    for jit in JITTERS:
        try:
            return cho_factor(G + jit * scale * np.eye(G.shape[0]), lower=False)
        except np.linalg.LinAlgError:
            continue
    cond = np.linalg.cond(G)
    raise NumericalError(
        f"{context}: {G.shape[0]}x{G.shape[0]} system not positive definite "
        f"after jitter escalation (cond~{cond:.3e})"
    )


class WoodburySolver:
    """Applies (S'S + Sigma^-1)^-1 as Sigma - Sigma S' (I + S Sigma S')^-1 S Sigma.

    Only the l x l core matrix is factored; the factor is cached so repeated
    solves (e.g. posterior mean plus a Gaussian draw) reuse it.
    """

    def __init__(self, S: np.ndarray, sigma: np.ndarray):
        S = np.atleast_2d(np.asarray(S, dtype=float))
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
            raise ConfigurationError("prior covariance entries must be positive")
        if S.shape[1] != sigma.size:
            raise ConfigurationError(
                f"S has {S.shape[1]} columns but Sigma has {sigma.size} entries"
            )
        self.S = S
        self.sigma = sigma
        self._SSig = S * sigma  # S Sigma, l x (p+1)
        core = self._SSig @ S.T
        core = 0.5 * (core + core.T) + np.eye(S.shape[0])
        self._factor = _chol_with_jitter(core, "woodbury core")

    def solve_core(self, rhs: np.ndarray) -> np.ndarray:
        """(I + S Sigma S')^-1 rhs."""
        return cho_solve(self._factor, rhs)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """(S'S + Sigma^-1)^-1 rhs for a vector or matrix rhs."""
        rhs = np.asarray(rhs, dtype=float)
        vec = rhs.ndim == 1
        R = rhs[:, None] if vec else rhs
        SigR = self.sigma[:, None] * R
        out = SigR - self._SSig.T @ self.solve_core(self.S @ SigR)
        return out[:, 0] if vec else out


def woodbury_solve(S: np.ndarray, sigma: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """One-shot (S'S + Sigma^-1)^-1 rhs; Sigma is the diagonal prior covariance."""
    return WoodburySolver(S, sigma).solve(rhs)


def weighted_cholesky(design: TruncatedDesign, W: np.ndarray) -> np.ndarray:
    """S = C_w V' with C_w the upper Cholesky factor of D U' diag(W) U D.

    S'S approximates X' diag(W) X within truncation error. W entries may be
    zero (IRLS weights vanish at saturated fits); an all-zero W yields S = 0.
    """
    W = np.asarray(W, dtype=float)
    if np.any(W < 0):
        raise ConfigurationError("weights must be non-negative")
    B = design.U * np.sqrt(W)[:, None]
    G = (B.T @ B) * np.outer(design.d, design.d)
    if not np.any(np.diag(G) > 0):
        return np.zeros((design.rank, design.p1))
    factor, _ = _chol_with_jitter(0.5 * (G + G.T), "weighted Gram")
    Cw = np.triu(factor)
    return Cw @ design.V.T
