"""SNP/gene geometry: proximity weights, boosts, regions, and the range fit.

A marker's prior log-odds of association is raised by nearby relevant genes.
Genes are first broken into non-overlapping blocks (relevance = mean relevance
of the covering genes), each block contributes the Gaussian mass between its
endpoints when a normal curve with sd ``phi`` is centered at the SNP, and the
per-SNP totals are rescaled so the largest boost is exactly 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from spatialboost.errors import ConfigurationError

DEFAULT_REGION_GAP = 30_000  # average human gene length, base pairs
DEFAULT_PHI = 30_000.0  # fallback when a region is too small to fit

# coarse search grid for the range parameter: 50 log-spaced points
PHI_GRID = np.logspace(2.0, 6.0, 50)


@dataclass(frozen=True)
class SnpLocus:
    id: str
    position: int
    chromosome: str = "1"

    def __post_init__(self):
        if self.position < 0:
            raise ConfigurationError(f"SNP {self.id}: negative position")


@dataclass(frozen=True)
class Gene:
    id: str
    start: int
    end: int
    chromosome: str = "1"

    def __post_init__(self):
        if not self.start < self.end:
            raise ConfigurationError(
                f"gene {self.id}: start {self.start} must be < end {self.end}"
            )


@dataclass(frozen=True)
class GenomicBlock:
    start: int
    end: int
    relevance: float
    chromosome: str = "1"


@dataclass
class BoostVector:
    """Per-SNP weighted relevance, rescaled to max 1 when any boost is positive.

    ``normalized`` is False only in the degenerate all-zero case, where the
    raw (zero) boosts are returned as-is and the inclusion prior falls back to
    a uniform logit.
    """

    values: np.ndarray
    phi: float
    normalized: bool = True

    def __len__(self):
        return len(self.values)


@dataclass
class RegionPartition:
    """Contiguous, non-overlapping SNP index ranges covering all SNPs."""

    ranges: list[tuple[int, int]]  # half-open [lo, hi) into the SNP list
    phis: list[float | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.phis:
            self.phis = [None] * len(self.ranges)

    def global_phi(self) -> float:
        fitted = [p for p in self.phis if p is not None]
        if not fitted:
            raise ConfigurationError("no fitted phi values in partition")
        return float(np.mean(fitted))


def build_blocks(genes: list[Gene], relevances: np.ndarray) -> list[GenomicBlock]:
    """Break possibly-overlapping genes into disjoint blocks per chromosome.

    Block relevance is the arithmetic mean of the relevances of all genes
    covering it (positive-length intersection; endpoint touching does not
    count).
    """
    relevances = np.asarray(relevances, dtype=float)
    if relevances.shape != (len(genes),):
        raise ConfigurationError(
            f"relevance length {relevances.size} != gene count {len(genes)}"
        )
    if not np.all(np.isfinite(relevances)) or np.any(relevances < 0):
        raise ConfigurationError("relevances must be finite and >= 0")

    blocks: list[GenomicBlock] = []
    by_chrom: dict[str, list[int]] = {}
    for i, g in enumerate(genes):
        by_chrom.setdefault(g.chromosome, []).append(i)

    for chrom, idx in by_chrom.items():
        cuts = sorted({p for i in idx for p in (genes[i].start, genes[i].end)})
        for a, b in zip(cuts[:-1], cuts[1:]):
            covering = [
                relevances[i]
                for i in idx
                if genes[i].start < b and genes[i].end > a
            ]
            if covering:
                blocks.append(GenomicBlock(a, b, float(np.mean(covering)), chrom))
    return blocks


def gene_weight(s_j: float, block: GenomicBlock, phi: float) -> float:
    """Gaussian mass of N(s_j, phi^2) over [block.start, block.end]."""
    if phi <= 0:
        raise ConfigurationError(f"phi must be positive, got {phi}")
    return float(ndtr((block.end - s_j) / phi) - ndtr((block.start - s_j) / phi))


def compute_boosts(
    snps: list[SnpLocus], blocks: list[GenomicBlock], phi: float
) -> BoostVector:
    """Sum block weight times block relevance per SNP, then rescale to max 1."""
    if not snps:
        raise ConfigurationError("at least one SNP required")
    if phi <= 0:
        raise ConfigurationError(f"phi must be positive, got {phi}")

    raw = np.zeros(len(snps))
    by_chrom: dict[str, list[GenomicBlock]] = {}
    for b in blocks:
        by_chrom.setdefault(b.chromosome, []).append(b)
    for j, snp in enumerate(snps):
        for b in by_chrom.get(snp.chromosome, ()):
            raw[j] += gene_weight(snp.position, b, phi) * b.relevance

    top = raw.max() if raw.size else 0.0
    if top <= 0.0:
        warnings.warn(
            "all raw boosts are zero (no genes near any SNP); returning "
            "unnormalized boosts",
            stacklevel=2,
        )
        return BoostVector(raw, phi, normalized=False)
    return BoostVector(raw / top, phi, normalized=True)


def partition_regions(
    snps: list[SnpLocus], genes: list[Gene], gap: int = DEFAULT_REGION_GAP
) -> RegionPartition:
    """Split SNPs at positional gaps >= ``gap``, then merge adjacent regions
    whose spans intersect a common gene. Chromosome boundaries always split.
    """
    if not snps:
        return RegionPartition([])

    ranges: list[tuple[int, int]] = []
    lo = 0
    for k in range(1, len(snps)):
        new_chrom = snps[k].chromosome != snps[k - 1].chromosome
        if new_chrom or snps[k].position - snps[k - 1].position >= gap:
            ranges.append((lo, k))
            lo = k
    ranges.append((lo, len(snps)))

    def span(r: tuple[int, int]) -> tuple[str, int, int]:
        lo, hi = r
        return (
            snps[lo].chromosome,
            snps[lo].position,
            snps[hi - 1].position,
        )

    def share_gene(r1, r2) -> bool:
        c1, a1, b1 = span(r1)
        c2, a2, b2 = span(r2)
        if c1 != c2:
            return False
        for g in genes:
            if g.chromosome != c1:
                continue
            if g.start <= b1 and g.end >= a1 and g.start <= b2 and g.end >= a2:
                return True
        return False

    merged = [ranges[0]]
    for r in ranges[1:]:
        if share_gene(merged[-1], r):
            merged[-1] = (merged[-1][0], r[1])
        else:
            merged.append(r)
    return RegionPartition(merged)


def correlation_model(distances: np.ndarray, phi: float) -> np.ndarray:
    """Modeled correlation magnitude 2*Phi(-d/phi) as a function of distance."""
    return 2.0 * ndtr(-np.abs(distances) / phi)


def fit_phi(
    genotype_columns: np.ndarray,
    positions: np.ndarray,
    default_phi: float = DEFAULT_PHI,
    grid: np.ndarray = PHI_GRID,
) -> float:
    """Fit the range parameter to the decay of genotype correlation.

    Minimizes the mean squared error between pairwise sample correlation
    magnitudes and 2*Phi(-d/phi) over a log grid, refined locally around the
    coarse minimum. Smallest minimizer wins on ties. Constant columns are
    excluded; regions with fewer than two usable columns fall back to
    ``default_phi``.
    """
    X = np.asarray(genotype_columns, dtype=float)
    positions = np.asarray(positions, dtype=float)
    if X.ndim != 2 or X.shape[1] != positions.size:
        raise ConfigurationError("genotype columns and positions misaligned")

    usable = np.std(X, axis=0) > 0
    if usable.sum() < 2:
        return float(default_phi)
    X = X[:, usable]
    pos = positions[usable]

    corr = np.abs(np.corrcoef(X, rowvar=False))
    iu = np.triu_indices(pos.size, k=1)
    target = corr[iu]
    dists = np.abs(pos[:, None] - pos[None, :])[iu]

    def mse(phi: float) -> float:
        return float(np.mean((target - correlation_model(dists, phi)) ** 2))

    errs = np.array([mse(p) for p in grid])
    k = int(np.argmin(errs))  # argmin returns the first (smallest) minimizer
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, grid.size - 1)]
    fine = np.logspace(np.log10(lo), np.log10(hi), 200)
    fine_errs = np.array([mse(p) for p in fine])
    return float(fine[int(np.argmin(fine_errs))])


def fit_phi_by_region(
    genotype_columns: np.ndarray,
    snps: list[SnpLocus],
    partition: RegionPartition,
    default_phi: float = DEFAULT_PHI,
) -> RegionPartition:
    """Fit phi independently for every region of the partition."""
    positions = np.array([s.position for s in snps], dtype=float)
    phis = []
    for lo, hi in partition.ranges:
        phis.append(
            fit_phi(genotype_columns[:, lo:hi], positions[lo:hi], default_phi)
        )
    return RegionPartition(list(partition.ranges), phis)
