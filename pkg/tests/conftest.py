"""Shared fixtures and independent oracles for the test suite."""

import numpy as np
import pytest


def gamma_series_pg(z: float, rng: np.random.Generator, size: int,
                    terms: int = 200) -> np.ndarray:
    """Truncated infinite-sum-of-gammas representation of PG(1, z).

    PG(1, z) = (1 / 2 pi^2) sum_k g_k / ((k - 1/2)^2 + z^2 / (4 pi^2)),
    g_k iid Exponential(1). Used as an independent sampling oracle; the
    truncation bias at 200 terms is far below test resolution.
    """
    k = np.arange(1, terms + 1)
    denom = (k - 0.5) ** 2 + (z / (2.0 * np.pi)) ** 2
    g = rng.standard_exponential((size, terms))
    return (g / denom).sum(axis=1) / (2.0 * np.pi**2)


def correlated_columns(C: np.ndarray, n: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Columns whose sample correlation matrix equals C exactly.

    Random Gaussian columns are centered and whitened to identity sample
    covariance, then colored by the Cholesky factor of C. Requires n > p.
    """
    p = C.shape[0]
    Z = rng.standard_normal((n, p))
    Z = Z - Z.mean(axis=0)
    cov = Z.T @ Z / n
    W = Z @ np.linalg.inv(np.linalg.cholesky(cov)).T
    return W @ np.linalg.cholesky(C).T


def dense_woodbury(S: np.ndarray, sigma: np.ndarray,
                   rhs: np.ndarray) -> np.ndarray:
    """Direct dense oracle for (S'S + Sigma^-1)^-1 rhs."""
    A = S.T @ S + np.diag(1.0 / sigma)
    return np.linalg.solve(A, rhs)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
