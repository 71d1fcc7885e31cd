import numpy as np
import pytest
from scipy.special import expit

from spatialboost.em import (
    EmState,
    FilterConfig,
    Hyperparameters,
    cm_beta,
    cm_sigma,
    e_step,
    em_filter_pipeline,
    em_fit,
    em_prior_covariance,
    em_ranking_scores,
    filter_round,
    log_joint,
    marginal_log_posterior,
    max_residual,
    ppl,
    restage,
    should_stop,
)
from spatialboost.errors import ConfigurationError
from spatialboost.linalg import truncate_design
from spatialboost.sim import synthetic_genotypes

HYPER = Hyperparameters(kappa=100.0, nu=3.0, lam=0.02, xi0=-4.0, xi1=2.0)


def _full_design(X):
    return truncate_design(X, min(X.shape))


def test_hyperparameter_validation():
    with pytest.raises(ConfigurationError):
        Hyperparameters(kappa=1.0, nu=1.0, lam=1.0, xi0=0.0, xi1=0.0)
    with pytest.raises(ConfigurationError):
        Hyperparameters(kappa=2.0, nu=-1.0, lam=1.0, xi0=0.0, xi1=0.0)
    with pytest.raises(ConfigurationError):
        Hyperparameters(kappa=2.0, nu=1.0, lam=1.0, xi0=0.0, xi1=-0.5)


def test_e_step_intercept_pinned():
    et = e_step(np.zeros(4), 0.01, np.zeros(3), HYPER)
    assert et[0] == 1.0


def test_e_step_reference_value_null_beta():
    hyper = Hyperparameters(kappa=100.0, nu=3.0, lam=0.02, xi0=-4.0, xi1=0.0)
    et = e_step(np.array([0.0, 0.0]), 0.01, np.zeros(1), hyper)
    # logit = -log(100)/2 - 4 = -6.3026
    assert et[1] == pytest.approx(0.00182, abs=2e-5)


def test_e_step_reference_value_boosted():
    et = e_step(np.array([0.0, 0.1]), 0.01, np.ones(1), HYPER)
    # logit = -2.3026 + 0.495 - 4 + 2 = -3.8076
    assert et[1] == pytest.approx(0.0217, abs=2e-4)


def test_e_step_monotone_in_beta_and_boost():
    probs = [
        e_step(np.array([0.0, b]), 0.01, np.zeros(1), HYPER)[1]
        for b in (0.0, 0.05, 0.1, 0.2)
    ]
    assert np.all(np.diff(probs) > 0)
    probs = [
        e_step(np.array([0.0, 0.0]), 0.01, np.array([b]), HYPER)[1]
        for b in (0.0, 0.3, 0.7, 1.0)
    ]
    assert np.all(np.diff(probs) > 0)


def test_e_step_rejects_bad_sigma2():
    with pytest.raises(ConfigurationError):
        e_step(np.zeros(2), 0.0, np.zeros(1), HYPER)


def test_cm_sigma_prior_mode_at_zero_beta():
    hyper = Hyperparameters(kappa=4.0, nu=2.0, lam=0.5, xi0=0.0, xi1=0.0)
    et = np.array([1.0, 0.3, 0.8])
    expected = 0.5 / (3 / 2.0 + 2.0 + 1.0)
    assert cm_sigma(np.zeros(3), et, hyper) == pytest.approx(expected)


def test_cm_sigma_hand_example():
    hyper = Hyperparameters(kappa=4.0, nu=1.0, lam=1.0, xi0=0.0, xi1=0.0)
    got = cm_sigma(np.array([1.0, 1.0]), np.array([1.0, 1.0]), hyper)
    assert got == pytest.approx(1.25 / 3.0, abs=1e-6)


def test_cm_sigma_large_kappa_limit():
    hyper = Hyperparameters(kappa=1e8, nu=1.0, lam=0.5, xi0=0.0, xi1=0.0)
    beta = np.array([2.0, 1.0, 3.0])
    et = np.array([1.0, 0.0, 0.0])
    expected = (0.5 * (1.0 + 9.0) + 0.5 * 4.0 / 1e8 + 0.5) / (
        3 / 2.0 + 1.0 + 1.0
    )
    assert cm_sigma(beta, et, hyper) == pytest.approx(expected, rel=1e-6)


def test_cm_sigma_floor_invariant(rng):
    for _ in range(20):
        p1 = int(rng.integers(2, 8))
        beta = rng.standard_normal(p1)
        et = rng.uniform(0, 1, p1)
        et[0] = 1.0
        floor = HYPER.lam / (p1 / 2.0 + HYPER.nu + 1.0)
        assert cm_sigma(beta, et, HYPER) >= floor - 1e-12


def test_cm_beta_balanced_intercept_stays_zero():
    X = np.ones((6, 1))
    y = np.array([0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
    design = _full_design(X)
    beta = cm_beta(design, y, np.zeros(1), np.ones(1), 0.01, HYPER)
    assert beta[0] == pytest.approx(0.0, abs=1e-12)


def test_cm_beta_matches_dense_irls_oracle(rng):
    n, p = 6, 2
    X = np.column_stack([np.ones(n), rng.integers(0, 3, (n, p)).astype(float)])
    y = rng.integers(0, 2, n).astype(float)
    beta = rng.standard_normal(p + 1) * 0.3
    et = np.array([1.0, 0.4, 0.9])
    sigma2 = 0.05
    design = _full_design(X)

    mu = expit(X @ beta)
    W = np.diag(mu * (1.0 - mu))
    sigma_vec = em_prior_covariance(et, sigma2, HYPER.kappa)
    A = X.T @ W @ X + np.diag(1.0 / sigma_vec)
    rhs = X.T @ W @ X @ beta + X.T @ (y - mu)
    expected = np.linalg.solve(A, rhs)
    got = cm_beta(design, y, beta, et, sigma2, HYPER)
    assert np.allclose(got, expected, atol=1e-8)


def test_cm_beta_infinite_shrinkage_limit(rng):
    X = np.column_stack([np.ones(5), rng.integers(0, 3, (5, 2)).astype(float)])
    design = _full_design(X)
    y = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    beta = rng.standard_normal(3)
    beta_new = cm_beta(design, y, beta, np.zeros(3), 1e-12, HYPER)
    assert np.max(np.abs(beta_new)) < 1e-6


def test_em_fit_iteration_contract(rng):
    X = np.column_stack([np.ones(8), rng.integers(0, 3, (8, 2)).astype(float)])
    y = rng.integers(0, 2, 8).astype(float)
    design = _full_design(X)
    with pytest.raises(ConfigurationError):
        em_fit(design, y, np.zeros(2), HYPER, max_iter=0)
    state = em_fit(design, y, np.zeros(2), HYPER, max_iter=1)
    assert state.iterations == 1
    assert len(state.log_joint_trace) == 1


def test_em_fit_null_simulation_shrinks():
    rng = np.random.default_rng(99)
    n, p = 60, 8
    X = np.column_stack([np.ones(n), rng.integers(0, 3, (n, p)).astype(float)])
    y = rng.integers(0, 2, n).astype(float)
    hyper = Hyperparameters(kappa=100.0, nu=3.0, lam=0.02, xi0=-6.0, xi1=0.0)
    state = em_fit(_full_design(X), y, np.zeros(p), hyper)
    assert np.all(state.etheta[1:] < 0.01)
    mode = cm_sigma(state.beta, state.etheta, hyper)
    assert state.sigma2 == pytest.approx(mode, rel=1e-6)
    assert not state.diverged


def test_em_fit_separated_genotype_reaches_stationary_point():
    rng = np.random.default_rng(5)
    n = 50
    x = np.concatenate([np.zeros(25), np.full(25, 2.0)])
    rng.shuffle(x)
    y = (x > 1.0).astype(float)
    X = np.column_stack([np.ones(n), x])
    design = _full_design(X)
    hyper = Hyperparameters(kappa=100.0, nu=3.0, lam=1.0, xi0=-1.0, xi1=0.0)
    state = em_fit(design, y, np.zeros(1), hyper)
    assert state.converged
    assert state.beta[1] > 0.5
    # stationarity: the penalized-likelihood gradient vanishes at the fit
    mu = expit(X @ state.beta)
    sigma_vec = em_prior_covariance(state.etheta, state.sigma2, hyper.kappa)
    grad = X.T @ (y - mu) - state.beta / sigma_vec
    assert np.max(np.abs(grad)) < 1e-3
    trace = np.array(state.log_joint_trace)
    assert np.all(np.diff(trace[2:]) > -1e-8)


def test_marginal_log_posterior_matches_direct_sum(rng):
    n, p = 12, 3
    X = np.column_stack([np.ones(n), rng.integers(0, 3, (n, p)).astype(float)])
    y = rng.integers(0, 2, n).astype(float)
    b = rng.uniform(0, 1, p)
    beta = rng.standard_normal(p + 1) * 0.2
    sigma2 = 0.3
    design = _full_design(X)

    eta = X @ beta
    ll = np.sum(y * eta - np.log1p(np.exp(eta)))
    direct = ll - (HYPER.nu + 1.0) * np.log(sigma2) - HYPER.lam / sigma2
    slab_sd = np.sqrt(sigma2 * HYPER.kappa)
    direct += -0.5 * np.log(sigma2 * HYPER.kappa) - beta[0] ** 2 / (
        2.0 * slab_sd**2
    )
    pj = expit(HYPER.xi0 + HYPER.xi1 * b)
    for j in range(p):
        slab = (
            pj[j]
            * np.exp(-beta[j + 1] ** 2 / (2 * sigma2 * HYPER.kappa))
            / np.sqrt(sigma2 * HYPER.kappa)
        )
        spike = (
            (1 - pj[j])
            * np.exp(-beta[j + 1] ** 2 / (2 * sigma2))
            / np.sqrt(sigma2)
        )
        direct += np.log(slab + spike)
    got = marginal_log_posterior(design, y, beta, sigma2, b, HYPER)
    assert got == pytest.approx(direct, abs=1e-8)


def _state_with_beta(beta):
    return EmState(beta=np.asarray(beta, float), sigma2=0.01, etheta=None)


def test_should_stop_cases():
    X = np.ones((1, 1))
    design = _full_design(X)
    # fitted 0.5 on y=1: residual exactly 0.5, strict inequality -> keep going
    assert not should_stop(_state_with_beta([0.0]), design, np.array([1.0]))
    # fitted 0.3 on y=1: residual 0.7 -> stop
    state = _state_with_beta([np.log(0.3 / 0.7)])
    assert should_stop(state, design, np.array([1.0]))
    assert max_residual(state, design, np.array([1.0])) == pytest.approx(0.7)
    # well-fitted point
    assert not should_stop(_state_with_beta([2.0]), design, np.array([1.0]))


def test_ppl_exact_values():
    n = 10
    X = np.ones((n, 1))
    design = _full_design(X)
    y = np.array([1.0] * 5 + [0.0] * 5)
    assert ppl(_state_with_beta([0.0]), design, y) == pytest.approx(n / 2.0)
    # saturated fit: fitted probabilities exactly 0/1
    Xs = np.diag([1.0] * 4)
    ys = np.array([1.0, 0.0, 1.0, 0.0])
    beta = np.array([800.0, -800.0, 800.0, -800.0])
    assert ppl(_state_with_beta(beta), _full_design(Xs), ys) == 0.0


def test_ppl_random_formula_oracle(rng):
    n = 7
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    design = _full_design(X)
    beta = rng.standard_normal(2)
    y = rng.integers(0, 2, n).astype(float)
    yhat = expit(X @ beta)
    expected = float(np.sum((y - yhat) ** 2 + yhat * (1 - yhat)))
    assert ppl(_state_with_beta(beta), design, y) == pytest.approx(expected)


def test_filter_round_removes_lowest():
    state = EmState(
        beta=np.zeros(5),
        sigma2=0.01,
        etheta=np.array([1.0, 0.9, 0.1, 0.5, 0.7]),
    )
    kept = filter_round(state, 4, fraction=0.25)
    assert kept.tolist() == [0, 2, 3]


def test_filter_round_tie_break_lower_index():
    state = EmState(
        beta=np.zeros(5),
        sigma2=0.01,
        etheta=np.array([1.0, 0.5, 0.2, 0.2, 0.9]),
    )
    kept = filter_round(state, 4, fraction=0.25)
    assert kept.tolist() == [0, 2, 3]


def test_filter_round_floor_arithmetic():
    state = EmState(
        beta=np.zeros(11), sigma2=0.01, etheta=np.linspace(1, 0.1, 11)
    )
    assert filter_round(state, 10, fraction=0.5).size == 5


def test_filter_round_validation():
    state = EmState(beta=np.zeros(3), sigma2=0.01, etheta=np.ones(3))
    with pytest.raises(ConfigurationError):
        filter_round(state, 1)
    with pytest.raises(ConfigurationError):
        filter_round(state, 2, fraction=1.5)


def _separable_instance(seed=3, n=40, p=100):
    rng = np.random.default_rng(seed)
    X = synthetic_genotypes(n, p, rng)
    w = rng.standard_normal(p)
    eta = X @ w
    eta = 3.0 * (eta - np.median(eta)) / eta.std()
    y = (eta > 0).astype(float)
    boosts = rng.uniform(0, 1, p)
    hyper = Hyperparameters(kappa=1000.0, nu=3.0, lam=5.0, xi0=1.0, xi1=1.0)
    return X, y, boosts, hyper


def test_em_filter_pipeline_single_round():
    X, y, boosts, hyper = _separable_instance()
    trace = em_filter_pipeline(
        X, y, boosts, hyper, FilterConfig(max_rounds=1, rank=40)
    )
    assert len(trace.rounds) == 1
    assert trace.rounds[0].retained.size == 100


def test_em_filter_pipeline_size_chain():
    X, y, boosts, hyper = _separable_instance()
    trace = em_filter_pipeline(
        X, y, boosts, hyper, FilterConfig(max_rounds=3, floor=2, rank=40)
    )
    assert [r.retained.size for r in trace.rounds] == [100, 75, 57]
    assert trace.final_survivors.size == 43
    assert not trace.stopped_early


def test_em_filter_pipeline_nesting_and_round_trip():
    X, y, boosts, hyper = _separable_instance()
    trace = em_filter_pipeline(
        X, y, boosts, hyper, FilterConfig(max_rounds=3, floor=2, rank=40)
    )
    prev = set(trace.initial.tolist())
    for rec in trace.rounds:
        cur = set(rec.survivors.tolist())
        assert cur <= prev
        assert len(cur) == rec.survivors.size  # no duplicates
        prev = cur
    assert all(0 <= j < 100 for j in trace.final_survivors)


def test_em_filter_pipeline_trace_tsv():
    X, y, boosts, hyper = _separable_instance()
    trace = em_filter_pipeline(
        X, y, boosts, hyper, FilterConfig(max_rounds=2, floor=2, rank=40)
    )
    text = trace.to_tsv([f"rs{j}" for j in range(100)], top_k=3)
    lines = text.strip().split("\n")
    assert lines[0].startswith("round\tretained")
    assert len(lines) == 1 + len(trace.rounds)
    assert "rs" in lines[1]


def test_em_ranking_scores_survivors_rank_highest():
    X, y, boosts, hyper = _separable_instance()
    trace = em_filter_pipeline(
        X, y, boosts, hyper, FilterConfig(max_rounds=3, floor=2, rank=40)
    )
    scores = em_ranking_scores(trace, 100)
    surv = trace.final_survivors
    removed_round0 = np.setdiff1d(trace.initial, trace.rounds[0].survivors)
    assert scores[surv].min() > scores[removed_round0].max()
    assert np.all(scores >= 0.0)


def test_restage_overrides_fields():
    staged = restage(HYPER, kappa=50.0, xi0=-3.0)
    assert staged.kappa == 50.0 and staged.xi0 == -3.0
    assert staged.lam == HYPER.lam
    assert HYPER.kappa == 100.0  # original untouched


def test_log_joint_finite(rng):
    X = np.column_stack([np.ones(6), rng.integers(0, 3, (6, 2)).astype(float)])
    design = _full_design(X)
    y = rng.integers(0, 2, 6).astype(float)
    val = log_joint(design, y, np.zeros(3), np.array([1.0, 0.5, 0.5]), 0.01, HYPER)
    assert np.isfinite(val)
