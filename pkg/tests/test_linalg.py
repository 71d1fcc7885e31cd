import numpy as np
import pytest

from spatialboost.errors import ConfigurationError
from spatialboost.linalg import (
    TruncatedDesign,
    WoodburySolver,
    select_rank,
    truncate_design,
    weighted_cholesky,
    woodbury_solve,
)
from tests.conftest import dense_woodbury


def test_select_rank_exact_low_rank(rng):
    u = rng.standard_normal((8, 2))
    v = rng.standard_normal((2, 5))
    X = u @ v
    assert select_rank(X, tol=1e-9) == 2


def test_select_rank_full_rank_noise(rng):
    X = rng.standard_normal((6, 4))
    assert select_rank(X, tol=1e-12) == 4


def test_select_rank_known_singular_values():
    # orthogonal columns scaled by known singular values: tail sums are exact
    s = np.array([4.0, 2.0, 1.0])
    X = np.diag(s)
    n, p1 = X.shape
    # keeping l=1 leaves residual sqrt(5); l=2 leaves 1
    tol = 1.5 / (n * p1)
    assert select_rank(X, tol=tol) == 2


def test_select_rank_validation():
    with pytest.raises(ConfigurationError):
        select_rank(np.empty((0, 0)))
    with pytest.raises(ConfigurationError):
        select_rank(np.eye(3), tol=0.0)
    with pytest.raises(ConfigurationError):
        select_rank(np.eye(3), tol=np.inf)


def test_truncate_design_rank_one(rng):
    u = rng.standard_normal(6)
    u /= np.linalg.norm(u)
    v = rng.standard_normal(4)
    v /= np.linalg.norm(v)
    X = 3.0 * np.outer(u, v)
    design = truncate_design(X, 1)
    assert design.d[0] == pytest.approx(3.0)
    assert np.allclose(np.abs(design.V[:, 0]), np.abs(v))
    assert np.allclose(design.reconstruct(), X, atol=1e-12)


def test_truncate_design_full_rank_zero_residual(rng):
    X = rng.standard_normal((7, 5))
    design = truncate_design(X, 5)
    assert design.frobenius_mse == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(design.reconstruct(), X, atol=1e-10)


def test_truncate_design_residual_matches_svd_oracle(rng):
    X = rng.standard_normal((5, 8))
    design = truncate_design(X, 3)
    s = np.linalg.svd(X, compute_uv=False)
    expected = np.sqrt(np.sum(s[3:] ** 2)) / (5 * 8)
    assert design.frobenius_mse == pytest.approx(expected, abs=1e-10)


def test_truncate_design_sign_determinism(rng):
    X = rng.standard_normal((6, 4))
    d1 = truncate_design(X, 3)
    d2 = truncate_design(X.copy(), 3)
    assert np.array_equal(d1.U, d2.U)
    assert np.array_equal(d1.V, d2.V)
    for k in range(3):
        col = d1.V[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        assert col[nz[0]] > 0


def test_truncate_design_rank_bounds(rng):
    X = rng.standard_normal((4, 3))
    with pytest.raises(ConfigurationError):
        truncate_design(X, 0)
    with pytest.raises(ConfigurationError):
        truncate_design(X, 4)


def test_matvec_rmatvec_consistency(rng):
    X = rng.standard_normal((9, 6))
    design = truncate_design(X, 6)
    beta = rng.standard_normal(6)
    r = rng.standard_normal(9)
    assert np.allclose(design.matvec(beta), X @ beta, atol=1e-10)
    assert np.allclose(design.rmatvec(r), X.T @ r, atol=1e-10)


def test_woodbury_zero_s_collapses_to_sigma(rng):
    sigma = rng.uniform(0.5, 2.0, 5)
    rhs = rng.standard_normal(5)
    out = woodbury_solve(np.zeros((1, 5)), sigma, rhs)
    assert np.allclose(out, sigma * rhs, atol=1e-12)


def test_woodbury_sherman_morrison(rng):
    s = rng.standard_normal(6)
    sigma = rng.uniform(0.5, 2.0, 6)
    rhs = rng.standard_normal(6)
    # (s s' + D)^-1 = D^-1 - D^-1 s s' D^-1 / (1 + s' D^-1 s), D = diag(1/sigma)
    Dinv = np.diag(sigma)
    expected = (
        Dinv - np.outer(Dinv @ s, s @ Dinv) / (1.0 + s @ Dinv @ s)
    ) @ rhs
    assert np.allclose(woodbury_solve(s[None, :], sigma, rhs), expected, atol=1e-10)


def test_woodbury_dense_oracle(rng):
    S = rng.standard_normal((4, 10))
    sigma = rng.uniform(0.1, 3.0, 10)
    rhs = rng.standard_normal(10)
    out = woodbury_solve(S, sigma, rhs)
    expected = dense_woodbury(S, sigma, rhs)
    assert np.linalg.norm(out - expected) / np.linalg.norm(expected) < 1e-8


def test_woodbury_matrix_rhs(rng):
    S = rng.standard_normal((3, 7))
    sigma = rng.uniform(0.1, 2.0, 7)
    R = rng.standard_normal((7, 4))
    out = WoodburySolver(S, sigma).solve(R)
    assert np.allclose(out, dense_woodbury(S, sigma, R), atol=1e-9)


def test_woodbury_validation(rng):
    S = rng.standard_normal((2, 4))
    with pytest.raises(ConfigurationError):
        WoodburySolver(S, np.array([1.0, -1.0, 1.0, 1.0]))
    with pytest.raises(ConfigurationError):
        WoodburySolver(S, np.ones(3))


def test_weighted_cholesky_identity_weights(rng):
    X = rng.standard_normal((10, 6))
    design = truncate_design(X, 6)
    S = weighted_cholesky(design, np.ones(10))
    gram = design.V @ np.diag(design.d**2) @ design.V.T
    assert np.allclose(S.T @ S, gram, atol=1e-8)


def test_weighted_cholesky_zero_weights(rng):
    X = rng.standard_normal((5, 4))
    design = truncate_design(X, 4)
    S = weighted_cholesky(design, np.zeros(5))
    assert np.all(S == 0.0)
    assert S.shape == (4, 4)


def test_weighted_cholesky_random_weights_dense_oracle(rng):
    X = rng.standard_normal((12, 5))
    design = truncate_design(X, 5)
    W = rng.uniform(0.01, 1.0, 12)
    S = weighted_cholesky(design, W)
    dense = X.T @ np.diag(W) @ X
    assert np.allclose(S.T @ S, dense, atol=1e-8)


def test_weighted_cholesky_rejects_negative_weights(rng):
    design = truncate_design(rng.standard_normal((4, 3)), 3)
    with pytest.raises(ConfigurationError):
        weighted_cholesky(design, np.array([1.0, -0.1, 1.0, 1.0]))


def test_truncated_design_shape_properties(rng):
    design = truncate_design(rng.standard_normal((7, 4)), 2)
    assert isinstance(design, TruncatedDesign)
    assert design.n == 7 and design.p1 == 4 and design.rank == 2
