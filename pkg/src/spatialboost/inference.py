"""Centroid selection, Bayesian FDR metrics, and hyperparameter criteria.

Selection thresholds probabilities at 1/(1+gamma); gamma > 0 trades
sensitivity against specificity, with gamma = 1 reducing to the median
probability rule. The EMBFDR variant plugs the EM conditional probabilities
<theta_j> into the BFDR formula to guide the choice of kappa.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from spatialboost.em import (
    EM_MAX_ITER,
    EM_TOL,
    Hyperparameters,
    em_fit,
)
from spatialboost.errors import ConfigurationError
from spatialboost.linalg import TruncatedDesign

# default gamma grid: thresholds 1/(1+gamma) spanning (0.02, 0.5]
DEFAULT_GAMMA_GRID = tuple(
    float(g) for g in (1.0 / np.linspace(0.5, 0.02, 13) - 1.0)
)


@dataclass(frozen=True)
class GainConfig:
    """Sensitivity-specificity trade-off for the generalized Hamming gain."""

    gamma: float

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")

    @property
    def threshold(self) -> float:
        return 1.0 / (1.0 + self.gamma)


def centroid(pi: np.ndarray, gamma: float) -> np.ndarray:
    """Position-wise expected-gain maximizer: select j iff
    pi_j >= 1/(1+gamma) (boundary included)."""
    threshold = GainConfig(gamma).threshold
    pi = np.asarray(pi, dtype=float)
    if np.any(pi < 0) or np.any(pi > 1):
        raise ConfigurationError("probabilities must lie in [0, 1]")
    return (pi >= threshold).astype(np.int8)


def bfdr(pi: np.ndarray, selection: np.ndarray) -> float | None:
    """Bayesian false discovery rate of a selection; ``None`` (the explicit
    no-discoveries sentinel) when the selection is empty."""
    pi = np.asarray(pi, dtype=float)
    sel = np.asarray(selection)
    total = float(sel.sum())
    if total == 0:
        return None
    return float(np.sum(sel * (1.0 - pi)) / total)


@dataclass
class EmbfdrPoint:
    gamma: float
    threshold: float
    embfdr: float | None  # None marks an empty selection
    retained: int


def embfdr_curve(etheta: np.ndarray, gammas) -> list[EmbfdrPoint]:
    """Centroid-then-BFDR on the EM conditional probabilities, per gamma."""
    points = []
    for g in gammas:
        sel = centroid(etheta, g)
        points.append(
            EmbfdrPoint(
                gamma=float(g),
                threshold=GainConfig(g).threshold,
                embfdr=bfdr(etheta, sel),
                retained=int(sel.sum()),
            )
        )
    return points


def xi1_bound(
    kappa: float, gamma: float, s: float, xi0: float = 0.0, check: bool = True
) -> float:
    """Upper bound on the gene-boost coefficient:

        log(kappa)/2 - xi0 - log(gamma) - s^2/2 (1 - 1/kappa)

    With ``check``, a negative bound raises: xi0 and gamma jointly violate
    the non-negativity constraint on xi1.
    """
    if kappa <= 1:
        raise ConfigurationError(f"kappa must be > 1, got {kappa}")
    if s <= 0 or gamma <= 0:
        raise ConfigurationError("s and gamma must be positive")
    bound = (
        0.5 * math.log(kappa)
        - xi0
        - math.log(gamma)
        - 0.5 * s * s * (1.0 - 1.0 / kappa)
    )
    if check and bound < 0:
        raise ConfigurationError(
            f"xi1 bound is negative ({bound:.4g}): xi0={xi0} and gamma={gamma} "
            "jointly violate the non-negativity constraint; lower xi0 or gamma"
        )
    return bound


def stringent_xi1_bound(
    gamma: float, s: float, xi0: float = 0.0, check: bool = True
) -> float:
    """The stringent variant: minimize the bound over kappa by kappa = s^2."""
    return xi1_bound(s * s, gamma, s, xi0, check=check)


def xi0_constraint_satisfied(
    kappa: float, gamma: float, s: float, xi0: float
) -> bool:
    """Joint constraint keeping the xi1 bound non-negative:
    xi0 + log(gamma) <= log(kappa)/2 - s^2/2 (1 - 1/kappa)."""
    return xi1_bound(kappa, gamma, s, xi0, check=False) >= 0


@dataclass
class BetaThreshold:
    index: int
    lower: float
    upper: float
    always_selected: bool  # s_j^2 < 0: the threshold collapses


def beta_thresholds(
    sigma2: float, hyper: Hyperparameters, boosts, gamma: float
) -> list[BetaThreshold]:
    """Per-marker selection bands +/- sigma s_j on beta_j, with

        s_j^2 = 2 kappa/(kappa-1) (log(kappa)/2 - xi0 - xi1 b_j - log(gamma)).

    Markers where the square root argument turns negative are flagged as
    always selected."""
    GainConfig(gamma)
    b = np.asarray(getattr(boosts, "values", boosts), dtype=float)
    s2 = (
        2.0
        * hyper.kappa
        / (hyper.kappa - 1.0)
        * (
            0.5 * math.log(hyper.kappa)
            - hyper.xi0
            - hyper.xi1 * b
            - math.log(gamma)
        )
    )
    sigma = math.sqrt(sigma2)
    out = []
    for j, v in enumerate(s2):
        if v < 0:
            out.append(BetaThreshold(j, 0.0, 0.0, True))
        else:
            half = sigma * math.sqrt(v)
            out.append(BetaThreshold(j, -half, half, False))
    return out


@dataclass
class KappaScanRow:
    kappa: float
    point: EmbfdrPoint


def kappa_scan(
    design_builder,
    y: np.ndarray,
    boosts,
    hyper_base: Hyperparameters,
    kappas,
    gammas=DEFAULT_GAMMA_GRID,
    max_iter: int = EM_MAX_ITER,
    tol: float = EM_TOL,
) -> list[KappaScanRow]:
    """EMBFDR curves across a kappa grid, one em_fit per kappa.

    ``design_builder`` is either a TruncatedDesign (reused across kappas) or
    a zero-argument callable producing one.
    """
    kappas = list(kappas)
    if not kappas:
        raise ConfigurationError("kappa grid must be non-empty")
    rows: list[KappaScanRow] = []
    for kappa in kappas:
        design = design_builder() if callable(design_builder) else design_builder
        hyper = replace(hyper_base, kappa=float(kappa))
        state = em_fit(design, y, boosts, hyper, max_iter=max_iter, tol=tol)
        for point in embfdr_curve(state.etheta[1:], gammas):
            rows.append(KappaScanRow(kappa=float(kappa), point=point))
    return rows


def kappa_scan_tsv(rows: list[KappaScanRow]) -> str:
    lines = ["kappa\tgamma\tthreshold\tembfdr\tretained"]
    for row in rows:
        pt = row.point
        metric = "NA" if pt.embfdr is None else f"{pt.embfdr:.10g}"
        lines.append(
            f"{row.kappa:.10g}\t{pt.gamma:.10g}\t{pt.threshold:.10g}"
            f"\t{metric}\t{pt.retained}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class SelectionReport:
    """Final per-marker selection at a given gamma."""

    snp_ids: list[str]
    probabilities: np.ndarray
    gamma: float
    selected: np.ndarray
    metric: float | None  # BFDR (or EMBFDR) of the selection

    @classmethod
    def build(
        cls, snp_ids: list[str], probabilities: np.ndarray, gamma: float
    ) -> "SelectionReport":
        probabilities = np.asarray(probabilities, dtype=float)
        sel = centroid(probabilities, gamma)
        return cls(
            snp_ids=list(snp_ids),
            probabilities=probabilities,
            gamma=gamma,
            selected=sel,
            metric=bfdr(probabilities, sel),
        )

    def to_tsv(self) -> str:
        metric = "NA" if self.metric is None else f"{self.metric:.10g}"
        lines = [f"# gamma={self.gamma:.10g}\tbfdr={metric}"]
        lines.append("snp\tprobability\tselected")
        for sid, prob, sel in zip(self.snp_ids, self.probabilities, self.selected):
            lines.append(f"{sid}\t{prob:.10g}\t{int(sel)}")
        return "\n".join(lines) + "\n"
