"""Cross-validated Post-Lasso estimators with a scikit-learn interface."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .cv import assign_folds, cross_validate_post_lasso, normalize_rule, select_lambda
from .exceptions import DataError
from .lasso import (_as_matrix, _as_response, hat_basis, hat_weight_sum, hat_weights,
                    lasso_path, post_lasso_refit, predict)


class _PostLassoBase(BaseEstimator):
    _family = "gaussian"
    _stratify = False

    def __init__(self, rule="min", n_folds=10, n_lambda=100, lambda_min_ratio=1e-4,
                 max_active=500, unpenalized=None, patience=None, random_state=0):
        self.rule = rule
        self.n_folds = n_folds
        self.n_lambda = n_lambda
        self.lambda_min_ratio = lambda_min_ratio
        self.max_active = max_active
        self.unpenalized = unpenalized
        self.patience = patience
        self.random_state = random_state

    def _penalty_flags(self, X, p):
        flags = np.ones(p, dtype=bool)
        if self.unpenalized is not None:
            u = np.asarray(self.unpenalized)
            if u.dtype == bool:
                if u.size != p:
                    raise ValueError("unpenalized mask does not match the number of columns")
                flags &= ~u
            else:
                flags[u.astype(int)] = False
        elif hasattr(X, "penalized"):
            flags = np.asarray(X.penalized, dtype=bool).copy()
        return flags

    def fit(self, X, y):
        """Build the penalty grid, cross-validate, select a penalty and refit.

        ``X`` may be an array or a :class:`~mvdml.design.DesignMatrix`, whose
        column flags then mark the unpenalized columns.
        """
        rule = normalize_rule(self.rule)
        pen = self._penalty_flags(X, np.shape(getattr(X, "values", X))[1])
        names = getattr(X, "names", None)
        X = _as_matrix(X)
        n = X.shape[0]
        y = _as_response(y, n, self._family)
        if self._family == "binomial" and np.unique(y).size < 2:
            raise DataError("degenerate response: binomial outcome has a single class")
        self.grid_, self.path_ = lasso_path(X, y, self._family, pen, self.n_lambda,
                                            self.max_active, self.lambda_min_ratio)
        strata = y if self._stratify else None
        self.folds_ = assign_folds(n, self.n_folds, strata, self.random_state)
        self.cv_result_ = cross_validate_post_lasso(X, y, self._family, self.grid_, self.folds_,
                                                    pen, patience=self.patience)
        self.lambda_index_ = select_lambda(self.cv_result_, rule)
        self.lambda_ = float(self.grid_.lambdas[self.lambda_index_])
        self.active_set_ = self.path_[self.lambda_index_].active_set
        self.refit_ = post_lasso_refit(X, y, self._family, self.active_set_,
                                       np.flatnonzero(~pen), names=names)
        self.penalized_ = pen
        self.coef_ = np.zeros(X.shape[1])
        self.coef_[self.refit_.columns] = self.refit_.coefficients
        self.intercept_ = self.refit_.intercept
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def n_selected_(self):
        """Penalized columns in the refit."""
        check_is_fitted(self, "refit_")
        return int(np.sum(self.penalized_[self.refit_.columns]))

    def decision_function(self, X):
        check_is_fitted(self, "refit_")
        return self.intercept_ + _as_matrix(X) @ self.coef_


class PostLassoRegressor(RegressorMixin, _PostLassoBase):
    """Least-squares Post-Lasso with a cross-validated penalty.

    Parameters
    ----------
    rule : {"min", "1se", "1se_plus", "2se_plus"}, default="min"
        Penalty selection rule applied to the CV curve.
    n_folds : int, default=10
    n_lambda : int, default=100
        Grid length before truncation.
    lambda_min_ratio : float, default=1e-4
    max_active : int, default=500
        The grid ends before the first penalty with more active columns.
    unpenalized : array-like of bool or int, optional
        Columns kept in every model. Defaults to the flags of a
        ``DesignMatrix`` input, else none.
    patience : int, optional
        Early stop of the CV scan; ``None`` scans the full grid.
    random_state : int, default=0
        Seed of the fold assignment.

    Attributes
    ----------
    grid_ : PenaltyGrid
    path_ : list of LassoFit
    cv_result_ : CvResult
    lambda_index_, lambda_ : selected grid position and penalty
    active_set_ : ndarray
        Lasso support at the selected penalty.
    refit_ : RefitModel
    coef_, intercept_ : refit coefficients on the original column scale
    """

    _family = "gaussian"

    def predict(self, X):
        check_is_fitted(self, "refit_")
        return predict(self.refit_, X)

    def hat_weights(self, X_train, X_query):
        """Per-query weights on the training outcomes reproducing ``predict``."""
        check_is_fitted(self, "refit_")
        return hat_weights(self.refit_, X_train, X_query)

    def hat_weight_sum(self, X_train, X_query, coef):
        check_is_fitted(self, "refit_")
        return hat_weight_sum(self.refit_, X_train, X_query, coef)

    def hat_basis(self, X_train):
        check_is_fitted(self, "refit_")
        return hat_basis(self.refit_, X_train)


class PostLassoClassifier(ClassifierMixin, _PostLassoBase):
    """Logistic Post-Lasso for a 0/1 response; folds are stratified by class.

    Takes the same parameters as :class:`PostLassoRegressor`.
    """

    _family = "binomial"
    _stratify = True

    def fit(self, X, y):
        super().fit(X, y)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "refit_")
        p1 = predict(self.refit_, X)
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)
