"""Highly adaptive lasso: indicator basis, lasso path, undersmoothing."""

from .basis import (
    BasisExpansion,
    BasisFunction,
    CapacityError,
    design_matrix,
    enumerate_basis,
    evaluate_basis,
    knot_cap,
    max_degree_for,
)
from .fit import (
    CvResult,
    FoldError,
    HalConfig,
    HalFit,
    HalResult,
    UndersmoothState,
    cv_select_lambda,
    fit_hal,
    fit_lasso_path,
    make_folds,
    normalized_scores,
    predict,
    score_threshold,
    undersmooth,
)
from .solver import ConvergenceError, LassoSolution, lambda_grid, lambda_max, lasso_path, penalized_objective
