"""Small-area estimation with area-specific slopes and sampling variances.

Robust pooled estimating equations identify each area's regression
coefficients and unit-level variance through an area-specific tilt of the
influence function; empirical best prediction combines the fitted model with
the area sample means; bootstrap and delete-one-area jackknife estimators
cover general uncertainty measures; and a Monte Carlo harness reproduces the
reference simulation designs at desk scale.
"""

__version__ = "0.1.0"

from . import backend
from .gee import FitControl, SingularDesignError, fit as fit_gee
from .influence import PsiSpec, expected_square, psi, psi_deriv
from .mle import fit_bhf, fit_bhf_reml, fit_mle, loglik
from .model import AreaInfo, Dataset, FitResult, ParamVector, UnitRecord, validate
from .mquantile import TauGrid, estimate_taus, fit_mquantile
from .predict import PredictorSet, compute_all, ebp, eblup_bhf, shrinkage
from .uncertainty import (MeasureSpec, UncertaintyEstimate, bootstrap_measure,
                          mcjack_measure, naive_rmse)

__all__ = [
    "AreaInfo",
    "Dataset",
    "FitControl",
    "FitResult",
    "MeasureSpec",
    "ParamVector",
    "PredictorSet",
    "PsiSpec",
    "SingularDesignError",
    "TauGrid",
    "UncertaintyEstimate",
    "UnitRecord",
    "backend",
    "bootstrap_measure",
    "compute_all",
    "ebp",
    "eblup_bhf",
    "estimate_taus",
    "expected_square",
    "fit_bhf",
    "fit_bhf_reml",
    "fit_gee",
    "fit_mle",
    "fit_mquantile",
    "loglik",
    "mcjack_measure",
    "naive_rmse",
    "psi",
    "psi_deriv",
    "shrinkage",
    "validate",
]
