"""Spatial Boost: hierarchical Bayesian variable selection for GWAS.

Gene-proximity priors on marker inclusion, EM-based marker filtering with
rank-truncated linear algebra, Polya-Gamma Gibbs sampling, and centroid/BFDR
inference, plus a simulator and single-SNP baseline for desk-scale studies.
"""

__version__ = "0.1.0"

from spatialboost.errors import (
    ConfigurationError,
    NumericalError,
    ParseError,
    PipelineError,
)

__all__ = [
    "ConfigurationError",
    "NumericalError",
    "ParseError",
    "PipelineError",
    "__version__",
]
