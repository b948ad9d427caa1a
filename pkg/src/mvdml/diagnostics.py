"""Implied outcome weights, covariate balance and weight summaries.

An efficient-score estimate with a linear outcome refit is a weighted sum
of the observed outcomes of its treatment group. The weight vector is the
inverse-probability part plus the mean of the refit's hat vectors minus
their propensity-weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NumericalError

IDENTITY_TOL = 1e-10
COMPONENTS = ("w", "w_p", "w_y", "w_py")


def ipw_weights(d_t, p_t, n=None):
    """``d_i / (n * p_i)``; zero outside the group."""
    d_t = np.asarray(d_t, dtype=float)
    p_t = np.asarray(p_t, dtype=float)
    n = d_t.size if n is None else n
    if np.any(p_t[d_t != 0] <= 0):
        raise NumericalError("non-positive propensity for a treated unit")
    out = np.zeros_like(d_t)
    on = d_t != 0
    out[on] = d_t[on] / (n * p_t[on])
    return out


def outcome_weights(model, X_train, X_query, coef=None):
    """Average hat vector ``(1/n) sum_i h_i`` over the query rows.

    With ``coef`` the query rows are combined as ``sum_i coef_i h_i`` instead.
    ``model`` is a fitted linear Post-Lasso estimator or refit.
    """
    refit = getattr(model, "refit_", model)
    from .lasso import hat_weight_sum

    m = np.shape(getattr(X_query, "values", X_query))[0]
    c = np.full(m, 1.0 / m) if coef is None else np.asarray(coef, dtype=float)
    return hat_weight_sum(refit, X_train, X_query, c)


@dataclass
class WeightSet:
    """Weights on the training units of one treatment group for one outcome.

    ``units`` are row indices into the full sample; the four weight vectors
    are aligned with them. ``n`` is the post-trim sample size and
    ``identity_gap`` the verified ``|Y_t . w - mu_hat|``.
    """

    outcome: str
    t: int
    units: np.ndarray
    w: np.ndarray
    w_p: np.ndarray
    w_y: np.ndarray
    w_py: np.ndarray
    n: int
    mu_hat: float
    identity_gap: float

    def component(self, name):
        return getattr(self, name)


def combine_weights(w_p, w_y, w_py):
    return np.asarray(w_p) + np.asarray(w_y) - np.asarray(w_py)


def check_identity(y_t, w, mu_hat, tol=IDENTITY_TOL, label=""):
    gap = abs(float(np.dot(y_t, w)) - float(mu_hat))
    if not gap <= tol:
        raise NumericalError(f"weighted representation broken{label}: |Y.w - mu| = {gap:.3e}")
    return gap


def dml_weights(dataset, design, nuisances, trim, j, t, mu_hat):
    """:class:`WeightSet` for outcome ``j`` and treatment ``t`` of a fitted pipeline."""
    kept = np.flatnonzero(trim.kept)
    n = kept.size
    units = nuisances.groups[t]
    model = nuisances.outcome_models[j][t]
    X_train = design.values[units]
    X_kept = design.values[kept]
    d = (dataset.treatment[kept] == t).astype(float)
    wp_kept = ipw_weights(d, nuisances.propensity[kept, t], n)
    basis = model.hat_basis(X_train)
    from .lasso import hat_weight_sum

    w_y = hat_weight_sum(model.refit_, X_train, X_kept, np.full(n, 1.0 / n), basis)
    w_py = hat_weight_sum(model.refit_, X_train, X_kept, wp_kept, basis)
    pos = np.searchsorted(units, kept[d == 1])
    w_p = np.zeros(units.size)
    w_p[pos] = wp_kept[d == 1]
    w = combine_weights(w_p, w_y, w_py)
    name = dataset.outcome_names[j]
    gap = check_identity(dataset.outcomes[units, j], w, mu_hat,
                         label=f" for outcome {name!r}, t={t}")
    return WeightSet(name, t, units, w, w_p, w_y, w_py, n, float(mu_hat), gap)


# -- balance ---------------------------------------------------------------

def _group_stats(X, treatment, labels):
    means = np.array([X[treatment == g].mean(axis=0) for g in labels])
    var = np.array([X[treatment == g].var(axis=0) for g in labels])
    return means, var


def standardized_differences(X, treatment, weights=None, convention="sum"):
    """Signed standardized differences, one row per treatment, one column per covariate.

    Row ``t`` compares group ``t`` with all other units: ``100 * (mean_t -
    mean_rest) / sqrt(var_t + var_rest)`` under the ``sum`` convention, or
    with the root of the mean of all group variances under ``mean``.
    Variances are unweighted population variances. With ``weights`` (one
    :class:`WeightSet` per treatment, in order) the means become weighted
    means: group ``t`` with its own weights and the rest pooled from the
    other groups, each with its own weights.

    Returns
    -------
    sd : ndarray, shape (T+1, p)
    constant : ndarray of bool, shape (p,)
        Columns with a zero denominator; their SD is reported as 0.
    """
    if convention not in ("sum", "mean"):
        raise ValueError("convention must be 'sum' or 'mean'")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    treatment = np.asarray(treatment)
    labels = np.unique(treatment)
    _, var_g = _group_stats(X, treatment, labels)
    if weights is not None:
        sums = np.array([ws.w @ X[ws.units] for ws in weights])
        mass = np.array([ws.w.sum() for ws in weights])
    sd = np.zeros((labels.size, X.shape[1]))
    constant = np.zeros(X.shape[1], dtype=bool)
    for a, g in enumerate(labels):
        inside = treatment == g
        if convention == "sum":
            denom = np.sqrt(X[inside].var(axis=0) + X[~inside].var(axis=0))
        else:
            denom = np.sqrt(var_g.mean(axis=0))
        if weights is None:
            diff = X[inside].mean(axis=0) - X[~inside].mean(axis=0)
        else:
            rest = np.arange(labels.size) != a
            diff = sums[a] / mass[a] - sums[rest].sum(axis=0) / mass[rest].sum()
        zero = denom <= 1e-12 * np.maximum(1.0, np.abs(X).max(axis=0))
        constant |= zero
        sd[a] = np.where(zero, 0.0, 100.0 * diff / np.where(zero, 1.0, denom))
    return sd, constant


@dataclass
class BalanceReport:
    """Per-column largest absolute standardized difference before and after weighting."""

    names: list
    sd_before: np.ndarray
    sd_after: np.ndarray
    flags: list
    convention: str = "sum"

    @staticmethod
    def _summary(x):
        x = np.asarray(x, dtype=float)
        return {"max": float(x.max()), "mean": float(x.mean()), "median": float(np.median(x)),
                "frac_gt_10": float(np.mean(x > 10)), "frac_gt_5": float(np.mean(x > 5))}

    def summary(self):
        return {"before": self._summary(self.sd_before), "after": self._summary(self.sd_after)}


def balance_report(X, treatment, weights, names=None, convention="sum"):
    X = np.asarray(X, dtype=float)
    before, const = standardized_differences(X, treatment, None, convention)
    after, _ = standardized_differences(X, treatment, weights, convention)
    names = list(names) if names is not None else [f"x{i}" for i in range(X.shape[1])]
    flags = ["constant" if c else "" for c in const]
    return BalanceReport(names, np.abs(before).max(axis=0), np.abs(after).max(axis=0), flags,
                         convention)


# -- weight summaries ------------------------------------------------------

def weight_anatomy(w):
    """Concentration and negativity of one weight vector.

    Percentages are relative to the sum of the positive weights.
    """
    w = np.asarray(getattr(w, "w", w), dtype=float)
    pos = w[w > 0]
    total = float(pos.sum())
    k = max(1, int(np.ceil(0.1 * w.size)))
    top = np.sort(w)[::-1][:k]
    neg = w[w < 0]
    pct = (lambda v: 100.0 * v / total) if total > 0 else (lambda v: float("nan"))
    return {
        "n_units": int(w.size),
        "sum": float(w.sum()),
        "sum_positive": total,
        "sum_negative": float(neg.sum()),
        "max_weight_pct": pct(float(pos.max())) if pos.size else float("nan"),
        "top_decile_pct": pct(float(top[top > 0].sum())),
        "n_negative": int(neg.size),
        "min_weight_pct": pct(float(neg.min())) if neg.size else 0.0,
    }


def _corr(vectors):
    M = np.column_stack(vectors)
    out = np.full((M.shape[1], M.shape[1]), np.nan)
    sd = M.std(axis=0)
    Z = (M - M.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    C = Z.T @ Z / M.shape[0]
    ok = sd > 1e-14 * np.maximum(1.0, np.abs(M).max(axis=0))
    out[np.ix_(ok, ok)] = C[np.ix_(ok, ok)]
    np.fill_diagonal(out, np.where(ok, 1.0, np.nan))
    return np.clip(out, -1.0, 1.0)


def weight_correlations(weight_sets):
    """Pearson correlations among (w, w_p, w_y, w_py), averaged over the given sets.

    Entries that are undefined in every set (a constant component) are NaN.
    """
    if isinstance(weight_sets, WeightSet):
        weight_sets = [weight_sets]
    mats = np.array([_corr([ws.component(c) for c in COMPONENTS]) for ws in weight_sets])
    valid = np.isfinite(mats)
    count = valid.sum(axis=0)
    total = np.where(valid, mats, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)
