import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvdml.diagnostics import (IDENTITY_TOL, WeightSet, balance_report, check_identity,
                               combine_weights, ipw_weights, outcome_weights,
                               standardized_differences, weight_anatomy, weight_correlations)
from mvdml.exceptions import NumericalError
from mvdml.lasso import post_lasso_refit


def _ws(w, w_p=None, w_y=None, w_py=None, units=None):
    w = np.asarray(w, dtype=float)
    z = np.zeros_like(w)
    units = np.arange(w.size) if units is None else np.asarray(units)
    return WeightSet("y", 0, units, w, z if w_p is None else np.asarray(w_p, float),
                     z if w_y is None else np.asarray(w_y, float),
                     z if w_py is None else np.asarray(w_py, float), w.size, 0.0, 0.0)


def test_ipw_weights_on_a_hand_case():
    w = ipw_weights([1, 0, 1, 1], [0.5, 0.5, 0.25, 1.0])
    assert w.tolist() == [0.5, 0.0, 1.0, 0.25]


def test_intercept_only_outcome_weights_are_uniform():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(12, 3))
    m = post_lasso_refit(X, rng.normal(size=12), "gaussian", [])
    assert np.allclose(outcome_weights(m, X, rng.normal(size=(30, 3))), 1 / 12)


def test_outcome_weights_sum_to_one_and_reproduce_the_mean_prediction():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 4))
    y = X @ [1, 0, -1, 0.5] + rng.normal(size=40)
    m = post_lasso_refit(X, y, "gaussian", [0, 2, 3])
    Xq = rng.normal(size=(25, 4))
    w_y = outcome_weights(m, X, Xq)
    assert w_y.sum() == pytest.approx(1.0, abs=1e-12)
    from mvdml.lasso import predict

    assert y @ w_y == pytest.approx(predict(m, Xq).mean(), abs=1e-12)


def test_identity_check():
    w = combine_weights([0.5, 0.5], [0.2, 0.3], [0.1, 0.1])
    assert w.tolist() == pytest.approx([0.6, 0.7])
    assert check_identity([1.0, 2.0], w, 2.0) < IDENTITY_TOL
    with pytest.raises(NumericalError, match="weighted representation"):
        check_identity([1.0, 2.0], w, 2.1)


def test_fitted_weights_reproduce_every_estimate(fitted_small, small_dataset):
    for t, ws in enumerate(fitted_small.weights_[0]):
        y = small_dataset.outcomes[ws.units, 0]
        assert abs(y @ ws.w - ws.mu_hat) < 1e-10
        assert ws.w_y.sum() == pytest.approx(1.0, abs=1e-10)
        assert np.allclose(ws.w, ws.w_p + ws.w_y - ws.w_py)
        assert np.all(small_dataset.treatment[ws.units] == t)


def test_sd_hand_example_and_conventions():
    X = np.array([[0.0], [2.0], [1.0], [3.0]])
    d = np.array([0, 0, 1, 1])
    sd, const = standardized_differences(X, d)
    # group means 1 and 2, both variances 1
    assert sd[:, 0] == pytest.approx([-100 / np.sqrt(2), 100 / np.sqrt(2)])
    sd_mean, _ = standardized_differences(X, d, convention="mean")
    assert sd_mean[1, 0] == pytest.approx(100.0)
    assert not const.any()


def test_constant_column_is_flagged_and_zero():
    X = np.column_stack([np.ones(6), np.arange(6.0)])
    sd, const = standardized_differences(X, [0, 0, 0, 1, 1, 1])
    assert const.tolist() == [True, False] and np.all(sd[:, 0] == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sd_is_antisymmetric_under_group_swap(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 3))
    d = np.r_[np.zeros(15, int), np.ones(15, int)]
    sd, _ = standardized_differences(X, d)
    sd_swapped, _ = standardized_differences(X, 1 - d)
    assert np.allclose(sd[0], -sd[1]) and np.allclose(sd_swapped[0], sd[1])


def test_weighted_sd_uses_group_weights():
    X = np.array([[0.0], [2.0], [1.0], [3.0]])
    d = np.array([0, 0, 1, 1])
    ws = [_ws([0.0, 1.0], units=[0, 1]), _ws([1.0, 0.0], units=[2, 3])]
    sd, _ = standardized_differences(X, d, ws)
    # weighted means become 2 and 1
    assert sd[0, 0] == pytest.approx(100 / np.sqrt(2))
    rep = balance_report(X, d, ws, names=["x"])
    assert rep.sd_after[0] == pytest.approx(100 / np.sqrt(2))
    assert set(rep.summary()["before"]) == {"max", "mean", "median", "frac_gt_10", "frac_gt_5"}


def test_anatomy_of_equal_and_dominant_weights():
    eq = weight_anatomy(np.full(20, 0.05))
    assert eq["max_weight_pct"] == pytest.approx(5.0)
    assert eq["top_decile_pct"] == pytest.approx(10.0)
    assert eq["n_negative"] == 0
    dom = weight_anatomy(np.r_[0.5, np.full(10, 0.05)])
    assert dom["max_weight_pct"] == pytest.approx(50.0)
    neg = weight_anatomy(np.array([0.6, 0.6, -0.2]))
    assert neg["sum_positive"] == pytest.approx(1.2) and neg["sum_negative"] == pytest.approx(-0.2)
    assert neg["min_weight_pct"] == pytest.approx(-100 * 0.2 / 1.2)


def test_correlations_of_identical_and_constant_components():
    rng = np.random.default_rng(3)
    v = rng.normal(size=50)
    C = weight_correlations(_ws(v, v, 2 * v + 1, np.zeros(50)))
    assert np.allclose(C[:3, :3], 1.0)
    assert np.all(np.isnan(C[3]))
    C2 = weight_correlations([_ws(v, v, -v), _ws(v, v, v)])
    assert C2[0, 2] == pytest.approx(0.0, abs=1e-12)


def test_fitted_correlation_matrix_is_symmetric(fitted_small):
    C = weight_correlations(fitted_small.weights_[0])
    assert C.shape == (4, 4)
    ok = np.isfinite(C)
    assert np.allclose(C[ok], C.T[ok]) and np.all(np.abs(C[ok]) <= 1)
