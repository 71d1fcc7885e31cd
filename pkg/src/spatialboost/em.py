"""ECM fitting of the spike-and-slab logistic model and the filtering loop.

The E-step computes conditional inclusion probabilities <theta_j>, the
CM-steps update sigma^2 (inverse-gamma mode) and beta (one ridge IRLS step
through the truncated design). The filter loop repeatedly removes the
markers with the lowest <theta_j> and refits until predictions degrade.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from spatialboost.errors import ConfigurationError
from spatialboost.linalg import (
    TruncatedDesign,
    WoodburySolver,
    select_rank,
    truncate_design,
    weighted_cholesky,
)

EM_TOL = 1e-6  # convergence threshold on max|delta beta|
EM_MAX_ITER = 200
ASCENT_SLACK = 1e-6  # log-joint drop beyond this flags divergence


@dataclass(frozen=True)
class Hyperparameters:
    """Model tuning parameters.

    kappa: spike/slab variance separation (> 1)
    nu, lam: inverse-gamma shape/scale for sigma^2
    xi0: baseline prior log-odds of association
    xi1: largest allowable gene boost on the log-odds (>= 0)
    phi: range of the gene-proximity kernel, base pairs
    s: minimum number of spike standard deviations for selection
    """

    kappa: float
    nu: float
    lam: float
    xi0: float
    xi1: float
    phi: float = 30_000.0
    s: float = 4.0

    def __post_init__(self):
        if self.kappa <= 1:
            raise ConfigurationError(f"kappa must be > 1, got {self.kappa}")
        if self.nu <= 0 or self.lam <= 0 or self.phi <= 0 or self.s <= 0:
            raise ConfigurationError("nu, lambda, phi, s must be positive")
        if self.xi1 < 0:
            raise ConfigurationError(f"xi1 must be >= 0, got {self.xi1}")


@dataclass
class EmState:
    """ECM iterate: beta (index 0 = intercept), sigma^2, <theta> (with
    <theta_0> = 1), iteration count, log-joint trace and status flags."""

    beta: np.ndarray
    sigma2: float
    etheta: np.ndarray
    iterations: int = 0
    log_joint_trace: list[float] = field(default_factory=list)
    converged: bool = False
    diverged: bool = False


def _marker_boosts(boosts, p: int) -> np.ndarray:
    values = np.asarray(getattr(boosts, "values", boosts), dtype=float)
    if values.shape != (p,):
        raise ConfigurationError(f"expected {p} marker boosts, got {values.shape}")
    return values


def e_step(
    beta: np.ndarray, sigma2: float, boosts, hyper: Hyperparameters
) -> np.ndarray:
    """Conditional inclusion probabilities <theta_j>; the intercept is pinned
    at 1. On the logit scale, for markers j >= 1:

        -log(kappa)/2 - beta_j^2/(2 sigma^2) (1/kappa - 1) + xi0 + xi1 b_j
    """
    if sigma2 <= 0:
        raise ConfigurationError("sigma2 must be positive")
    beta = np.asarray(beta, dtype=float)
    b = _marker_boosts(boosts, beta.size - 1)
    logits = (
        -0.5 * np.log(hyper.kappa)
        - (beta[1:] ** 2 / (2.0 * sigma2)) * (1.0 / hyper.kappa - 1.0)
        + hyper.xi0
        + hyper.xi1 * b
    )
    etheta = np.empty_like(beta)
    etheta[0] = 1.0
    etheta[1:] = expit(logits)
    return etheta


def prior_scale(etheta: np.ndarray, kappa: float) -> np.ndarray:
    """theta_j/kappa + 1 - theta_j, the inverse relative slab variance."""
    return etheta / kappa + 1.0 - etheta


def cm_sigma(beta: np.ndarray, etheta: np.ndarray, hyper: Hyperparameters) -> float:
    """Conditional mode of sigma^2 given beta and <theta>."""
    beta = np.asarray(beta, dtype=float)
    p1 = beta.size
    num = 0.5 * np.sum(beta**2 * prior_scale(etheta, hyper.kappa)) + hyper.lam
    return float(num / (p1 / 2.0 + hyper.nu + 1.0))


def em_prior_covariance(
    etheta: np.ndarray, sigma2: float, kappa: float
) -> np.ndarray:
    """Diagonal of the expected prior covariance on beta."""
    return sigma2 / prior_scale(etheta, kappa)


def cm_beta(
    design: TruncatedDesign,
    y: np.ndarray,
    beta: np.ndarray,
    etheta: np.ndarray,
    sigma2: float,
    hyper: Hyperparameters,
) -> np.ndarray:
    """One ridge IRLS step:

        beta+ = (X'WX + Sigma^-1)^-1 (X'WX beta + X'(y - mu))

    with mu_i = logit^-1(x_i' beta), W = diag(mu (1 - mu)), everything
    routed through the truncated factors and a Woodbury solve.
    """
    mu = expit(design.matvec(beta))
    W = mu * (1.0 - mu)
    S = weighted_cholesky(design, W)
    rhs = S.T @ (S @ beta) + design.rmatvec(y - mu)
    sigma = em_prior_covariance(etheta, sigma2, hyper.kappa)
    return WoodburySolver(S, sigma).solve(rhs)


def log_joint(
    design: TruncatedDesign,
    y: np.ndarray,
    beta: np.ndarray,
    theta: np.ndarray,
    sigma2: float,
    hyper: Hyperparameters,
) -> float:
    """Log joint density of (y, theta, beta, sigma^2) up to a constant; theta
    may be binary (Gibbs) or the conditional expectation (ECM trace)."""
    eta = design.matvec(beta)
    p1 = beta.size
    ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    pen = float(np.sum(beta**2 * prior_scale(theta, hyper.kappa))) / (2.0 * sigma2)
    return (
        ll
        - p1 / 2.0 * np.log(sigma2)
        - pen
        - (hyper.nu + 1.0) * np.log(sigma2)
        - hyper.lam / sigma2
    )


def marginal_log_posterior(
    design: TruncatedDesign,
    y: np.ndarray,
    beta: np.ndarray,
    sigma2: float,
    boosts,
    hyper: Hyperparameters,
) -> float:
    """Log posterior of (beta, sigma^2) with the inclusion indicators summed
    out, up to a constant. This is the objective the ECM iteration ascends
    (the plug-in log joint can dip slightly across E-steps)."""
    y = np.asarray(y, dtype=float)
    beta = np.asarray(beta, dtype=float)
    b = _marker_boosts(boosts, beta.size - 1)
    eta = design.matvec(beta)
    ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    # intercept is slab-only
    out = ll - 0.5 * np.log(sigma2 * hyper.kappa) - beta[0] ** 2 / (
        2.0 * sigma2 * hyper.kappa
    )
    prior_logit = hyper.xi0 + hyper.xi1 * b
    log_p1 = -np.logaddexp(0.0, -prior_logit)
    log_p0 = -np.logaddexp(0.0, prior_logit)
    slab = (
        -0.5 * np.log(sigma2 * hyper.kappa)
        - beta[1:] ** 2 / (2.0 * sigma2 * hyper.kappa)
        + log_p1
    )
    spike = -0.5 * np.log(sigma2) - beta[1:] ** 2 / (2.0 * sigma2) + log_p0
    out += float(np.sum(np.logaddexp(slab, spike)))
    return out - (hyper.nu + 1.0) * np.log(sigma2) - hyper.lam / sigma2


def em_fit(
    design: TruncatedDesign,
    y: np.ndarray,
    boosts,
    hyper: Hyperparameters,
    max_iter: int = EM_MAX_ITER,
    tol: float = EM_TOL,
    beta0: np.ndarray | None = None,
) -> EmState:
    """Alternate E-step / CM-sigma / CM-beta until max|delta beta| < tol.

    A log-joint decrease beyond the ascent slack once the iteration has
    stabilized (max|delta beta| < 1e-3) flags the state as diverged; the
    state is still returned.
    """
    if max_iter < 1:
        raise ConfigurationError("max_iter must be >= 1")
    y = np.asarray(y, dtype=float)
    p1 = design.p1
    beta = np.zeros(p1) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    sigma2 = hyper.lam / (hyper.nu + 1.0)  # prior mode
    etheta = e_step(beta, sigma2, boosts, hyper)

    state = EmState(beta=beta, sigma2=sigma2, etheta=etheta)
    stabilized = False
    for it in range(1, max_iter + 1):
        etheta = e_step(beta, sigma2, boosts, hyper)
        sigma2 = cm_sigma(beta, etheta, hyper)
        beta_new = cm_beta(design, y, beta, etheta, sigma2, hyper)
        lj = log_joint(design, y, beta_new, etheta, sigma2, hyper)
        if (
            stabilized
            and state.log_joint_trace
            and lj < state.log_joint_trace[-1] - ASCENT_SLACK
        ):
            state.diverged = True
        state.log_joint_trace.append(lj)
        delta = float(np.max(np.abs(beta_new - beta)))
        stabilized = stabilized or delta < 1e-3
        beta = beta_new
        state.beta, state.sigma2, state.etheta = beta, sigma2, etheta
        state.iterations = it
        if delta < tol:
            state.converged = True
            break
    return state


def fitted_probabilities(design: TruncatedDesign, beta: np.ndarray) -> np.ndarray:
    return expit(design.matvec(beta))


def should_stop(state: EmState, design: TruncatedDesign, y: np.ndarray) -> bool:
    """True iff any fitted probability misses its response by more than 0.5
    (strict inequality)."""
    resid = np.abs(np.asarray(y, float) - fitted_probabilities(design, state.beta))
    return bool(np.max(resid) > 0.5)


def max_residual(state: EmState, design: TruncatedDesign, y: np.ndarray) -> float:
    resid = np.abs(np.asarray(y, float) - fitted_probabilities(design, state.beta))
    return float(np.max(resid))


def ppl(state: EmState, design: TruncatedDesign, y: np.ndarray) -> float:
    """Posterior predictive loss: squared error plus predictive variance."""
    yhat = fitted_probabilities(design, state.beta)
    y = np.asarray(y, dtype=float)
    return float(np.sum((y - yhat) ** 2 + yhat * (1.0 - yhat)))


def filter_round(
    state: EmState, p_current: int, fraction: float = 0.25
) -> np.ndarray:
    """Local indices (0-based, markers only) retained after removing the
    floor(fraction * p_current) markers with the lowest <theta_j>. Ties are
    broken by removing the lower index first; the intercept never leaves."""
    if p_current < 2:
        raise ConfigurationError("need at least 2 markers to filter")
    if not 0 < fraction < 1:
        raise ConfigurationError(f"fraction must be in (0,1), got {fraction}")
    k = int(np.floor(fraction * p_current))
    order = np.argsort(state.etheta[1 : p_current + 1], kind="stable")
    removed = set(order[:k].tolist())
    return np.array([j for j in range(p_current) if j not in removed], dtype=int)


@dataclass
class FilterRound:
    retained: np.ndarray  # original marker indices fit in this round
    state: EmState
    ppl: float
    max_residual: float
    survivors: np.ndarray  # original marker indices retained after filtering


@dataclass
class FilterTrace:
    initial: np.ndarray
    rounds: list[FilterRound] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def final_survivors(self) -> np.ndarray:
        return self.rounds[-1].survivors if self.rounds else self.initial

    def to_tsv(self, snp_ids: list[str] | None = None, top_k: int = 10) -> str:
        """Per-round summary: round, retained count, ppl, max residual, and
        the top-k markers by <theta_j>."""
        lines = ["round\tretained\tppl\tmax_residual\ttop_markers"]
        for r, rec in enumerate(self.rounds):
            et = rec.state.etheta[1:]
            order = np.argsort(-et, kind="stable")[:top_k]
            tops = []
            for loc in order:
                orig = rec.retained[loc]
                name = snp_ids[orig] if snp_ids is not None else f"snp{orig}"
                tops.append(f"{name}={et[loc]:.6g}")
            lines.append(
                f"{r}\t{rec.retained.size}\t{rec.ppl:.10g}"
                f"\t{rec.max_residual:.10g}\t{','.join(tops)}"
            )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class FilterConfig:
    max_rounds: int = 20
    fraction: float = 0.25
    rank_tol: float = 0.01
    rank: int | None = None  # explicit rank overrides rank_tol
    floor: int | None = None  # defaults to max(10, n // 10)


def em_filter_pipeline(
    X_markers: np.ndarray,
    y: np.ndarray,
    boosts,
    hyper: Hyperparameters,
    config: FilterConfig = FilterConfig(),
    max_iter: int = EM_MAX_ITER,
    tol: float = EM_TOL,
) -> FilterTrace:
    """Iterate em_fit -> record PPL -> filter lowest-<theta> markers.

    Stops on the residual rule, on round exhaustion, or when another removal
    would fall below the marker floor. Boosts are subset (never re-normalized)
    and beta is warm-started by restriction to the surviving coordinates.
    The design is re-factored per round since filtering changes columns.
    """
    X_markers = np.asarray(X_markers, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X_markers.shape
    b_all = _marker_boosts(boosts, p)
    floor = config.floor if config.floor is not None else max(10, n // 10)
    if config.max_rounds < 1:
        raise ConfigurationError("max_rounds must be >= 1")

    current = np.arange(p)
    trace = FilterTrace(initial=current.copy())
    beta_warm: np.ndarray | None = None

    for _ in range(config.max_rounds):
        Xc = np.column_stack([np.ones(n), X_markers[:, current]])
        l = config.rank or select_rank(Xc, config.rank_tol)
        design = truncate_design(Xc, min(l, min(Xc.shape)))
        state = em_fit(
            design, y, b_all[current], hyper, max_iter=max_iter, tol=tol,
            beta0=beta_warm,
        )
        record = FilterRound(
            retained=current.copy(),
            state=state,
            ppl=ppl(state, design, y),
            max_residual=max_residual(state, design, y),
            survivors=current.copy(),
        )
        trace.rounds.append(record)

        if should_stop(state, design, y):
            trace.stopped_early = True
            break
        k = int(np.floor(config.fraction * current.size))
        if k < 1 or current.size - k < max(floor, 2):
            break
        keep_local = filter_round(state, current.size, config.fraction)
        record.survivors = current[keep_local]
        beta_warm = np.concatenate(
            [state.beta[:1], state.beta[1:][keep_local]]
        )
        current = record.survivors
    return trace


def em_ranking_scores(trace: FilterTrace, p: int) -> np.ndarray:
    """Per-marker ranking statistic from a filter trace.

    A marker removed in round r scores r + <theta_j> at removal time; final
    survivors score (last round) + final <theta_j>, so survival depth
    dominates and <theta> breaks ties within a round.
    """
    scores = np.full(p, -1.0)
    for r, rec in enumerate(trace.rounds):
        et = rec.state.etheta[1:]
        for loc, orig in enumerate(rec.retained):
            scores[orig] = r + float(et[loc])
    return scores


def restage(hyper: Hyperparameters, **overrides) -> Hyperparameters:
    """Stage-specific hyperparameter block (e.g. a different kappa and xi0
    for the sampling stage)."""
    return replace(hyper, **overrides)
