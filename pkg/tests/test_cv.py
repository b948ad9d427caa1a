import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from mvdml.cv import (CvResult, FoldAssignment, assign_folds, cross_validate_post_lasso,
                      normalize_rule, select_lambda)
from mvdml.exceptions import DataError
from mvdml.lasso import PenaltyGrid, fit_lasso_path, lasso_path, post_lasso_refit, predict
from mvdml.postlasso import PostLassoClassifier, PostLassoRegressor
from mvdml.synth import loo_cv_oracle


def test_one_unit_per_fold():
    f = assign_folds(10, 10, seed=3)
    assert sorted(f.fold_id.tolist()) == list(range(1, 11))


def test_two_equal_strata_split_evenly():
    strata = np.r_[np.zeros(50), np.ones(50)]
    f = assign_folds(100, 10, strata, seed=1)
    for k in range(1, 11):
        members = strata[f.fold_id == k]
        assert (members == 0).sum() == 5 and (members == 1).sum() == 5


def test_fold_assignment_is_deterministic_and_checked():
    s = np.random.default_rng(0).integers(0, 3, 77)
    assert np.array_equal(assign_folds(77, 10, s, 5).fold_id, assign_folds(77, 10, s, 5).fold_id)
    with pytest.raises(ValueError):
        assign_folds(5, 10)


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 300), st.integers(2, 10), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_fold_sizes_balanced_within_strata(n, K, n_strata, seed):
    strata = np.random.default_rng(seed).integers(0, n_strata, n)
    f = assign_folds(n, K, strata, seed)
    sizes = np.bincount(f.fold_id, minlength=K + 1)[1:]
    assert sizes.max() - sizes.min() <= 1
    for s in np.unique(strata):
        if (strata == s).sum() >= K:
            c = np.bincount(f.fold_id[strata == s], minlength=K + 1)[1:]
            assert c.max() - c.min() <= 1


def _cv_from(per_fold):
    K, M = per_fold.shape
    valid = np.all(np.isfinite(per_fold), axis=0)
    mean = np.where(valid, np.nan_to_num(per_fold).mean(axis=0), np.nan)
    se = np.where(valid, np.nan_to_num(per_fold).std(axis=0, ddof=1) / np.sqrt(K), np.nan)
    return CvResult(PenaltyGrid(np.logspace(0, -2, M)), per_fold, mean, se, np.arange(M),
                    np.zeros((K, M), int), valid)


def test_rules_on_a_hand_curve():
    # SE 0.5 at the minimum (index 3): 1se band 1.5, 2se band 2.0
    mean = np.array([5, 3, 1.4, 1, 1.05, 1.45, 1.9, 4.0])
    spread = 0.5 * np.sqrt(10) * np.sqrt(9 / 10)
    per_fold = np.tile(mean, (10, 1))
    per_fold[:5, 3] += spread
    per_fold[5:, 3] -= spread
    cv = _cv_from(per_fold)
    assert cv.se_mse[3] == pytest.approx(0.5)
    assert select_lambda(cv, "min") == 3
    assert select_lambda(cv, "1se") == 2
    assert select_lambda(cv, "1se+") == 5
    assert select_lambda(cv, "2se_plus") == 6


def test_invalid_points_are_skipped_and_all_invalid_errors():
    per_fold = np.tile(np.array([3.0, 1.0, 2.0, 0.5]), (10, 1))
    per_fold[0, 3] = np.nan
    cv = _cv_from(per_fold)
    assert select_lambda(cv, "min") == 1
    with pytest.raises(DataError):
        select_lambda(_cv_from(np.full((10, 3), np.nan)), "min")


def test_rule_aliases():
    assert normalize_rule("1se+") == "1se_plus" and normalize_rule("2SE+") == "2se_plus"
    with pytest.raises(ValueError):
        normalize_rule("3se")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rule_ordering_on_random_curves(seed):
    rng = np.random.default_rng(seed)
    per_fold = rng.uniform(0.5, 2.0, size=(10, 25)) + rng.uniform(0, 1, size=25)
    cv = _cv_from(per_fold)
    lam = [cv.lambdas[select_lambda(cv, r)] for r in ("1se", "min", "1se_plus", "2se_plus")]
    assert lam[0] >= lam[1] >= lam[2] >= lam[3]


def test_curve_statistics_follow_their_definitions():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(120, 6))
    y = X[:, 0] + rng.normal(size=120)
    grid, _ = lasso_path(X, y, n_points=20)
    cv = cross_validate_post_lasso(X, y, "gaussian", grid, assign_folds(120, 10, seed=0))
    assert np.allclose(cv.mean_mse, cv.per_fold_mse.mean(axis=0))
    assert np.allclose(cv.se_mse, cv.per_fold_mse.std(axis=0, ddof=1) / np.sqrt(10))


def test_fold_error_matches_manual_refit():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(90, 5))
    y = (rng.random(90) < 1 / (1 + np.exp(-X[:, 0]))).astype(float)
    grid, _ = lasso_path(X, y, "binomial", n_points=15)
    folds = assign_folds(90, 5, y, seed=2)
    cv = cross_validate_post_lasso(X, y, "binomial", grid, folds)
    train, test = folds.train_test(2)
    fit = fit_lasso_path(X[train], y[train], "binomial", grid)[9]
    m = post_lasso_refit(X[train], y[train], "binomial", fit.active_set)
    manual = np.mean((y[test] - predict(m, X[test])) ** 2)
    assert cv.per_fold_mse[1, 9] == pytest.approx(manual, rel=1e-7)


@pytest.mark.parametrize("n", [8, 12, 20])
def test_leave_one_out_matches_exhaustive_oracle(n):
    rng = np.random.default_rng(n + 100)
    X = rng.normal(size=(n, 3))
    y = X[:, 0] + 0.5 * rng.normal(size=n)
    grid, _ = lasso_path(X, y, n_points=10)
    cv = cross_validate_post_lasso(X, y, "gaussian", grid, FoldAssignment(np.arange(n) + 1, n, 0))
    assert np.allclose(cv.per_fold_mse, loo_cv_oracle(X, y, grid.lambdas), rtol=1e-10,
                       atol=1e-12)


def test_regressor_estimator_api():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(200, 10))
    y = 2 * X[:, 0] - X[:, 5] + rng.normal(size=200)
    m = PostLassoRegressor(n_lambda=30).fit(X, y)
    assert {0, 5} <= set(m.active_set_.tolist())
    assert m.predict(X).shape == (200,)
    assert m.score(X, y) > 0.7
    assert clone(m).get_params()["n_lambda"] == 30
    H = m.hat_weights(X, X[:2])
    assert np.allclose(y @ H, m.predict(X[:2]))


def test_classifier_estimator_api_and_unpenalized_columns():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(300, 8))
    y = (rng.random(300) < 1 / (1 + np.exp(-1.5 * X[:, 2]))).astype(int)
    c = PostLassoClassifier(n_lambda=30, unpenalized=[7]).fit(X, y)
    assert 7 in c.refit_.columns and 2 in c.active_set_
    P = c.predict_proba(X)
    assert np.allclose(P.sum(axis=1), 1.0) and set(c.predict(X)) <= {0, 1}
