"""Penalized B-spline quantile regression with plug-in inference."""

__version__ = "0.1.0"

from ._bandwidth import sj_bandwidth
from ._linalg import SingularSystemError
from .inference import (
    ConditionalDensity, InferenceReport, approx_bias_estimate, band_for_fit, conditional_density,
    confidence_band, shrinkage_bias_estimate, variance_estimate,
)
from .penalty import PenaltyOperator, difference_matrix, penalty_value
from .selection import (
    InvalidConfiguration, SelectionGrid, effective_df, gacv_score, gcv_score, select_model,
)
from .sim import SimModel, generate_dataset, normality_study, run_mise_study, true_quantile
from .solver import (
    ConvergenceWarning, IRLSConfig, QuantileFit, check_loss, fit_local_linear_quantile,
    fit_penalized_mean, fit_penalized_quantile, irls_weights, psi,
)
from .spline_basis import (
    BasisSpec, DesignMatrix, bernoulli_poly, build_basis, design_matrix, eval_basis, spline_value,
)
