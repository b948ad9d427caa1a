"""Double machine learning for multivalued treatments with Post-Lasso nuisance models."""

__version__ = "0.1.0"

from .cv import assign_folds, cross_validate_post_lasso, select_lambda
from .dataset_io import BinSpec, Dataset, PRACTICE_BINS, SchemaConfig, load_dataset
from .design import DesignExpander, DesignMatrix, build_design
from .diagnostics import (WeightSet, balance_report, standardized_differences,
                          weight_anatomy, weight_correlations)
from .dml import (EffectTable, MultivaluedDML, clustered_variance, iid_variance,
                  pairwise_effect, potential_outcome, trim_common_support)
from .exceptions import ConfigError, ConvergenceError, DataError, DMLError, NumericalError
from .lasso import lasso_path, post_lasso_refit
from .postlasso import PostLassoClassifier, PostLassoRegressor

__all__ = [
    "BinSpec", "ConfigError", "ConvergenceError", "DMLError", "DataError", "Dataset",
    "DesignExpander", "DesignMatrix", "EffectTable", "MultivaluedDML", "NumericalError",
    "PRACTICE_BINS", "PostLassoClassifier", "PostLassoRegressor", "SchemaConfig", "WeightSet",
    "assign_folds", "balance_report", "build_design", "clustered_variance",
    "cross_validate_post_lasso", "iid_variance", "lasso_path", "load_dataset",
    "pairwise_effect", "post_lasso_refit", "potential_outcome", "select_lambda",
    "standardized_differences", "trim_common_support", "weight_anatomy",
    "weight_correlations",
]
