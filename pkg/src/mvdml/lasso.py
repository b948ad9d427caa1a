"""Lasso paths, Post-Lasso refits and hat-matrix weights.

The internal objective is ``(1/2n) * deviance + lam * sum_{j penalized} |beta_j|``
with all columns standardized to mean zero and unit (population) variance and
a free, unpenalized intercept. For the gaussian family the deviance is the
residual sum of squares, so a penalty ``lam`` here corresponds to ``2 n lam``
in the unscaled formulation ``RSS + lam * ||beta||_1``. For the binomial
family the deviance is minus twice the log-likelihood.

Coefficients are always reported on the original column scale.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import expit

from ._cd import weighted_cd, weighted_col_sq
from .exceptions import ConvergenceError, DataError, NumericalError

logger = logging.getLogger(__name__)

FAMILIES = ("gaussian", "binomial")

_PROB_CLIP = 1e-5
_CONST_TOL = 1e-12


@dataclass(frozen=True)
class PenaltyGrid:
    """Decreasing penalty sequence on the internal (standardized) scale."""

    lambdas: np.ndarray
    max_active: int = 500
    lambda_max: float = np.nan
    active_counts: np.ndarray | None = field(default=None, compare=False)
    stop_reason: str = "grid exhausted"

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        if lam.ndim != 1 or lam.size == 0:
            raise ValueError("penalty grid must be a non-empty 1-d sequence")
        if np.any(lam <= 0) or np.any(np.diff(lam) >= 0):
            raise ValueError("penalty grid must be positive and strictly decreasing")
        object.__setattr__(self, "lambdas", lam)

    def __len__(self):
        return self.lambdas.size


@dataclass
class LassoFit:
    family: str
    intercept: float
    coefficients: np.ndarray
    active_set: np.ndarray
    lam: float
    deviance: float = np.nan
    n_iter: int = 0

    @property
    def n_active(self) -> int:
        return int(self.active_set.size)


@dataclass
class RefitModel:
    """Unpenalized refit on a selected set of columns.

    ``columns`` indexes the training matrix; ``coefficients`` are aligned with
    it. ``center``/``scale`` describe the standardization used while fitting,
    which hat-weight computations reuse so they reproduce predictions exactly.
    """

    family: str
    intercept: float
    coefficients: np.ndarray
    columns: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    names: tuple | None = None
    dropped: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    warning: str | None = None
    n_iter: int = 0

    @property
    def n_features(self) -> int:
        return int(self.columns.size)


def _check_family(family):
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}, got {family!r}")


def _as_matrix(X):
    values = getattr(X, "values", X)
    X = np.asarray(values, dtype=float)
    if X.ndim != 2:
        raise DataError("design must be a 2-d matrix")
    if not np.all(np.isfinite(X)):
        raise DataError("design contains non-finite values")
    return X


def _as_response(y, n, family):
    y = np.asarray(y, dtype=float).ravel()
    if y.size != n:
        raise DataError(f"response has {y.size} entries, design has {n} rows")
    if not np.all(np.isfinite(y)):
        raise DataError("response contains non-finite values")
    if family == "binomial" and not np.all((y == 0) | (y == 1)):
        raise DataError("binomial response must be coded 0/1")
    return y


def _penalty_mask(X, penalized):
    p = X.shape[1]
    if penalized is None:
        return np.ones(p, dtype=bool)
    penalized = getattr(penalized, "penalized", penalized)
    mask = np.asarray(penalized, dtype=bool).ravel()
    if mask.size != p:
        raise ValueError(f"penalty flags have length {mask.size}, expected {p}")
    return mask


def _standardize(X):
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    usable = scale > _CONST_TOL * np.maximum(1.0, np.abs(center))
    safe = np.where(usable, scale, 1.0)
    Z = (X - center) / safe
    Z[:, ~usable] = 0.0
    return np.asfortranarray(Z), center, safe, usable


def _deviance(y, eta, family):
    if family == "gaussian":
        return float(np.sum((y - eta) ** 2))
    # -2 loglik computed stably
    return float(2.0 * np.sum(np.logaddexp(0.0, eta) - y * eta))


class _PathProblem:
    """Standardized lasso problem solved along a decreasing penalty sequence."""

    def __init__(self, X, y, family, penalized, tol=1e-7, max_sweeps=10000,
                 max_irls=50, kkt_tol=1e-7):
        _check_family(family)
        self.family = family
        self.X = _as_matrix(X)
        self.n, self.p = self.X.shape
        self.y = _as_response(y, self.n, family)
        self.penalized = _penalty_mask(self.X, penalized)
        self.tol = tol
        self.max_sweeps = max_sweeps
        self.max_irls = max_irls
        self.kkt_tol = kkt_tol
        self.Z, self.center, self.scale, self.usable = _standardize(self.X)
        self.pen_idx = np.flatnonzero(self.penalized & self.usable)
        self.unpen_idx = np.flatnonzero(~self.penalized & self.usable)
        self.beta = np.zeros(self.p)
        ybar = self.y.mean()
        if family == "binomial":
            if ybar <= 0.0 or ybar >= 1.0:
                raise DataError("degenerate response: binomial outcome has a single class")
            self.b0 = float(np.log(ybar / (1.0 - ybar)))
        else:
            self.b0 = float(ybar)
        self.null_deviance = _deviance(self.y, np.full(self.n, self.b0), family)
        self.grad = None
        self.lam = np.inf
        self._solve(np.inf, self.unpen_idx)
        self.grad = self.gradient()
        self.lambda_max = float(np.max(np.abs(self.grad[self.pen_idx]))) if self.pen_idx.size else 0.0

    # -- evaluation helpers ------------------------------------------------
    def eta(self):
        nz = np.flatnonzero(self.beta)
        return self.b0 + self.Z[:, nz] @ self.beta[nz]

    def gradient(self):
        """Gradient of the smooth part with the sign of a score: ``Z'(y - mu)/n``."""
        eta = self.eta()
        resid = self.y - (eta if self.family == "gaussian" else expit(eta))
        return self.Z.T @ resid / self.n

    def deviance(self):
        return _deviance(self.y, self.eta(), self.family)

    def active(self):
        idx = self.pen_idx[self.beta[self.pen_idx] != 0.0]
        return idx

    def kkt_violation(self, lam, grad=None):
        g = self.gradient() if grad is None else grad
        worst = 0.0
        if self.unpen_idx.size:
            worst = max(worst, float(np.max(np.abs(g[self.unpen_idx]))))
        if self.pen_idx.size:
            b = self.beta[self.pen_idx]
            gp = g[self.pen_idx]
            act = b != 0.0
            if np.any(act):
                worst = max(worst, float(np.max(np.abs(gp[act] - lam * np.sign(b[act])))))
            if np.any(~act):
                worst = max(worst, float(np.max(np.abs(gp[~act]) - lam)))
        return worst

    # -- solvers -----------------------------------------------------------
    def _cd_gaussian(self, work, lam, tol):
        r = self.y - self.eta()
        w = np.ones(self.n)
        v = weighted_col_sq(self.Z, w, work)
        b0, sweeps, ok = weighted_cd(self.Z, r, w, self.beta, self.b0, work,
                                     self.penalized, v, lam, tol, self.max_sweeps)
        self.b0 = float(b0)
        return sweeps, ok

    def _cd_binomial(self, work, lam, tol):
        total = 0
        for _ in range(self.max_irls):
            beta_old = self.beta.copy()
            b0_old = self.b0
            eta = self.eta()
            mu = expit(eta)
            mc = np.clip(mu, _PROB_CLIP, 1.0 - _PROB_CLIP)
            w = mc * (1.0 - mc)
            r = (self.y - mu) / w
            v = weighted_col_sq(self.Z, w, work)
            b0, sweeps, ok = weighted_cd(self.Z, r, w, self.beta, self.b0, work,
                                         self.penalized, v, lam, tol, self.max_sweeps)
            self.b0 = float(b0)
            total += sweeps
            if not ok:
                return total, False
            change = max(float(np.max(np.abs(self.beta - beta_old), initial=0.0)),
                         abs(self.b0 - b0_old))
            if change < tol:
                return total, True
        return total, False

    def _solve(self, lam, work):
        """Solve on the working set; returns (sweeps, full gradient or None)."""
        work = np.ascontiguousarray(np.sort(work), dtype=np.int64)
        fit = self._cd_gaussian if self.family == "gaussian" else self._cd_binomial
        tol = self.tol
        total = 0
        g = None
        for _ in range(6):
            sweeps, ok = fit(work, lam, tol)
            total += sweeps
            if not ok:
                raise ConvergenceError(
                    f"coordinate descent did not converge at lambda={lam:.6g} "
                    f"({self.family}, {work.size} working columns)")
            if not np.isfinite(lam):
                break
            g = self.gradient()
            if self._kkt_on(g, lam, work) <= self.kkt_tol:
                break
            tol /= 10.0
        return total, g

    def _kkt_on(self, g, lam, work):
        b = self.beta[work]
        gw = g[work]
        pen = self.penalized[work]
        out = 0.0
        if np.any(~pen):
            out = max(out, float(np.max(np.abs(gw[~pen]))))
        act = pen & (b != 0.0)
        if np.any(act):
            out = max(out, float(np.max(np.abs(gw[act] - lam * np.sign(b[act])))))
        ina = pen & (b == 0.0)
        if np.any(ina):
            out = max(out, float(np.max(np.abs(gw[ina]) - lam)))
        return out

    def step(self, lam):
        """Advance the warm-started solution to penalty ``lam``."""
        prev = self.lam if np.isfinite(self.lam) else self.lambda_max
        g = self.grad if self.grad is not None else self.gradient()
        strong = self.pen_idx[np.abs(g[self.pen_idx]) >= 2.0 * lam - prev]
        work = np.union1d(np.union1d(self.unpen_idx, self.active()), strong)
        total = 0
        while True:
            sweeps, g = self._solve(lam, work)
            total += sweeps
            outside = np.setdiff1d(self.pen_idx, work, assume_unique=True)
            viol = outside[np.abs(g[outside]) > lam]
            if viol.size == 0:
                break
            work = np.union1d(work, viol)
        self.grad = g
        self.lam = lam
        return total

    def current_fit(self, n_iter=0):
        coef = np.zeros(self.p)
        coef[self.usable] = self.beta[self.usable] / self.scale[self.usable]
        intercept = self.b0 - float(coef @ self.center)
        return LassoFit(self.family, float(intercept), coef, self.active(),
                        float(self.lam), self.deviance(), n_iter)

    def path(self, lambdas):
        for lam in lambdas:
            it = self.step(float(lam))
            yield self.current_fit(it)


def lasso_path(X, y, family="gaussian", penalized=None, n_points=100, max_active=500,
               min_ratio=1e-4, saturation=0.999, **solver):
    """Build the penalty grid and the lasso path along it in one pass.

    The grid is log-spaced from the smallest penalty that zeroes every
    penalized coefficient down to ``min_ratio`` times that value. It ends
    before the first point whose solution has more than ``max_active``
    penalized columns or whose coordinate descent does not converge, or
    right after the first point whose deviance ratio reaches ``saturation``.

    Returns
    -------
    grid : PenaltyGrid
    fits : list of LassoFit
    """
    prob = _PathProblem(X, y, family, penalized, **solver)
    if prob.pen_idx.size == 0:
        raise DataError("degenerate design: no penalized, non-constant column")
    lam_max = prob.lambda_max
    if not lam_max > 1e-12 * max(1.0, float(np.std(prob.y))):
        raise DataError("degenerate response: no penalized column is correlated with the response")
    lambdas = lam_max * np.logspace(0.0, np.log10(min_ratio), n_points)
    fits, counts = [], []
    reason = "grid exhausted"
    for lam in lambdas:
        try:
            it = prob.step(float(lam))
        except ConvergenceError as exc:
            if not fits:
                raise
            reason = f"no convergence at lambda={lam:.6g}"
            logger.warning("penalty grid truncated: %s", exc)
            break
        fit = prob.current_fit(it)
        if fit.n_active > max_active:
            reason = f"more than {max_active} active columns"
            break
        fits.append(fit)
        counts.append(fit.n_active)
        if prob.null_deviance > 0 and 1.0 - fit.deviance / prob.null_deviance >= saturation:
            reason = "saturated fit"
            break
    grid = PenaltyGrid(lambdas[:len(fits)], max_active, lam_max,
                       np.asarray(counts, dtype=int), reason)
    return grid, fits


def lambda_grid(X, y, family="gaussian", n_points=100, max_active=500, penalized=None,
                min_ratio=1e-4, **kwargs):
    """Log-spaced penalty grid from the empty model down to ``min_ratio * lambda_max``."""
    grid, _ = lasso_path(X, y, family, penalized, n_points, max_active, min_ratio, **kwargs)
    return grid


def fit_lasso_path(X, y, family, grid, penalized=None, **solver):
    """Warm-started lasso fits at every penalty of ``grid``."""
    lambdas = grid.lambdas if isinstance(grid, PenaltyGrid) else PenaltyGrid(grid).lambdas
    prob = _PathProblem(X, y, family, penalized, **solver)
    return list(prob.path(lambdas))


def kkt_residual(X, y, fit, penalized=None):
    """Largest KKT violation of ``fit`` recomputed from scratch (internal scale)."""
    X = _as_matrix(X)
    y = _as_response(y, X.shape[0], fit.family)
    pen = _penalty_mask(X, penalized)
    Z, center, scale, usable = _standardize(X)
    beta = np.where(usable, fit.coefficients * scale, 0.0)
    eta = fit.intercept + X @ fit.coefficients
    mu = eta if fit.family == "gaussian" else expit(eta)
    g = Z.T @ (y - mu) / X.shape[0]
    lam = fit.lam
    out = abs(float(np.mean(y - mu)))
    for j in np.flatnonzero(usable):
        if not pen[j]:
            out = max(out, abs(g[j]))
        elif beta[j] != 0.0:
            out = max(out, abs(g[j] - lam * np.sign(beta[j])))
        else:
            out = max(out, abs(g[j]) - lam)
    return float(out)


def lasso_objective(X, y, intercept, coefficients, lam, penalized=None, family="gaussian"):
    """Internal-scale objective value of an original-scale coefficient vector."""
    X = _as_matrix(X)
    y = _as_response(y, X.shape[0], family)
    pen = _penalty_mask(X, penalized)
    scale = X.std(axis=0)
    eta = intercept + X @ np.asarray(coefficients, dtype=float)
    l1 = float(np.sum(np.abs(coefficients[pen]) * scale[pen]))
    return _deviance(y, eta, family) / (2.0 * X.shape[0]) + lam * l1


# -- Post-Lasso ------------------------------------------------------------

def _independent_columns(G, tol=1e-10):
    """Greedy in-order selection of linearly independent columns of a Gram matrix.

    A column is dropped when its squared residual norm, after projection on
    the columns kept before it, falls below ``tol`` times its own squared norm.
    """
    k = G.shape[0]
    keep = []
    L = np.zeros((k, k))
    for j in range(k):
        if keep:
            m = len(keep)
            l = solve_triangular(L[:m, :m], G[keep, j], lower=True)
            d = G[j, j] - l @ l
        else:
            l = np.empty(0)
            d = G[j, j]
        if d > tol * max(G[j, j], 0.0) and d > 0.0:
            m = len(keep)
            L[m, :m] = l
            L[m, m] = np.sqrt(d)
            keep.append(j)
    return np.asarray(keep, dtype=int)


def _selected_columns(X, selected, forced):
    cols = set(int(j) for j in np.atleast_1d(selected).ravel())
    if forced is not None:
        forced = np.asarray(forced)
        if forced.dtype == bool:
            forced = np.flatnonzero(forced)
        cols |= set(int(j) for j in forced.ravel())
    cols = np.asarray(sorted(cols), dtype=int)
    if cols.size and (cols.min() < 0 or cols.max() >= X.shape[1]):
        raise IndexError("selected column index out of range")
    return cols


def _logistic_newton(A, y, beta, ridge, max_iter, gtol):
    n, k = A.shape
    pen = np.full(k, ridge)
    pen[0] = 0.0

    def objective(b):
        eta = A @ b
        return float(np.sum(np.logaddexp(0.0, eta) - y * eta)) / n + 0.5 * float(pen @ (b * b))

    obj = objective(beta)
    for it in range(1, max_iter + 1):
        eta = A @ beta
        mu = expit(eta)
        g = A.T @ (y - mu) / n - pen * beta
        if np.max(np.abs(g)) < gtol:
            return beta, it - 1, True
        w = mu * (1.0 - mu)
        H = (A * w[:, None]).T @ A / n + np.diag(pen)
        try:
            step = cho_solve(cho_factor(H), g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            new = objective(cand)
            if new <= obj - 1e-4 * t * float(g @ step) or t < 1e-10:
                break
            t *= 0.5
        if not np.all(np.isfinite(cand)):
            return beta, it, False
        beta, obj = cand, new
    eta = A @ beta
    g = A.T @ (y - expit(eta)) / n - pen * beta
    return beta, max_iter, bool(np.max(np.abs(g)) < gtol)


def post_lasso_refit(X, y, family, selected, forced=None, *, names=None, gtol=1e-8,
                     max_iter=50, rank_tol=1e-10, start=None):
    """Unpenalized refit on the union of ``selected`` and ``forced`` columns.

    Columns that are constant in ``X`` are discarded, then later columns that
    are numerically dependent on earlier ones. Gaussian refits are exact
    least squares (QR); binomial refits are Newton/IRLS maximum likelihood.
    When the logistic fit fails to converge or ends with a linear index above
    30 in absolute value, both signs of separation, it
    is repeated with a ridge penalty of ``1e-8`` on the non-intercept terms
    and ``warning`` is set on the result.

    ``start`` optionally maps column index to a starting coefficient
    (standardized scale) for the binomial Newton iterations.
    """
    _check_family(family)
    X = _as_matrix(X)
    n = X.shape[0]
    y = _as_response(y, n, family)
    cols = _selected_columns(X, selected, forced)
    dropped = []
    if cols.size:
        sub = X[:, cols]
        center = sub.mean(axis=0)
        scale = sub.std(axis=0)
        ok = scale > _CONST_TOL * np.maximum(1.0, np.abs(center))
        dropped.extend(cols[~ok].tolist())
        cols, center, scale = cols[ok], center[ok], scale[ok]
    else:
        center = scale = np.empty(0)
    Z = (X[:, cols] - center) / scale if cols.size else np.empty((n, 0))
    if cols.size:
        keep = _independent_columns(Z.T @ Z / n, rank_tol)
        if keep.size < cols.size:
            lost = np.setdiff1d(np.arange(cols.size), keep)
            dropped.extend(cols[lost].tolist())
            cols, center, scale, Z = cols[keep], center[keep], scale[keep], Z[:, keep]
    warning = None
    n_iter = 0
    if family == "gaussian":
        ybar = float(y.mean())
        if cols.size:
            Q, R = np.linalg.qr(Z)
            if np.min(np.abs(np.diag(R))) <= 0.0:
                raise NumericalError("rank-deficient refit design after filtering")
            b = solve_triangular(R, Q.T @ (y - ybar))
        else:
            b = np.empty(0)
        b0 = ybar
    else:
        A = np.column_stack([np.ones(n), Z])
        ybar = float(y.mean())
        if ybar <= 0.0 or ybar >= 1.0:
            raise DataError("degenerate response: binomial outcome has a single class")
        beta = np.zeros(cols.size + 1)
        beta[0] = np.log(ybar / (1.0 - ybar))
        if start is not None:
            for pos, j in enumerate(cols):
                beta[pos + 1] = start.get(int(j), 0.0)
        beta, n_iter, ok = _logistic_newton(A, y, beta, 0.0, max_iter, gtol)
        # a tiny gradient with a huge index means the likelihood has no finite maximizer
        if not ok or np.max(np.abs(A @ beta)) > 30.0:
            beta = np.zeros(cols.size + 1)
            beta[0] = np.log(ybar / (1.0 - ybar))
            beta, extra, ok = _logistic_newton(A, y, beta, 1e-8, 4 * max_iter, gtol)
            n_iter += extra
            if not ok:
                raise ConvergenceError(
                    f"logistic refit did not converge on {cols.size} columns "
                    "even with the ridge fallback")
            warning = "separation: refit with ridge penalty 1e-8"
            warnings.warn(warning, RuntimeWarning, stacklevel=2)
        b0, b = float(beta[0]), beta[1:]
    coef = b / scale if cols.size else np.empty(0)
    intercept = float(b0 - coef @ center) if cols.size else float(b0)
    col_names = tuple(names[j] for j in cols) if names is not None else None
    return RefitModel(family, intercept, coef, cols, center, scale, col_names,
                      np.asarray(sorted(dropped), dtype=int), warning, n_iter)


def _model_block(m, X):
    if hasattr(X, "columns") and m.names is not None and hasattr(X, "index_of"):
        idx = X.index_of(m.names)
        X = X.values
    else:
        X = getattr(X, "values", X)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        idx = m.columns
        if idx.size and X.shape[1] <= idx.max():
            raise DataError(f"design lacks model column {int(idx.max())}")
    return np.asarray(X, dtype=float)[:, idx]


def linear_index(m, X):
    return m.intercept + _model_block(m, X) @ m.coefficients


def predict(m, X):
    """Predictions of a refit model: linear index, or probabilities for binomial."""
    eta = linear_index(m, X)
    return eta if m.family == "gaussian" else expit(eta)


def hat_basis(m, X_train):
    """QR factors of the refit design ``[1, Z]`` on the training rows."""
    B = _model_block(m, X_train)
    A = np.column_stack([np.ones(B.shape[0]), (B - m.center) / m.scale])
    Q, R = np.linalg.qr(A)
    if np.min(np.abs(np.diag(R))) <= 1e-12 * np.max(np.abs(np.diag(R))):
        raise NumericalError("singular normal equations in hat-weight computation")
    return Q, R


def hat_weights(m, X_train, x_query, basis=None):
    """Weights ``A (A'A)^{-1} a_q`` that map training outcomes to a prediction.

    ``x_query`` may be one row or a matrix of rows; the result has one
    column of length ``N_train`` per query row (squeezed for a single row).
    """
    if m.family != "gaussian":
        raise ValueError("hat weights are defined for linear refits only")
    Q, R = hat_basis(m, X_train) if basis is None else basis
    xq = np.asarray(getattr(x_query, "values", x_query), dtype=float)
    single = xq.ndim == 1
    Bq = _model_block(m, xq)
    Aq = np.column_stack([np.ones(Bq.shape[0]), (Bq - m.center) / m.scale])
    H = Q @ solve_triangular(R, Aq.T, trans="T")
    return H[:, 0] if single else H


def hat_weight_sum(m, X_train, x_query, coef, basis=None):
    """``sum_i coef_i * h_i`` over query rows without forming the hat matrix.

    Equals ``hat_weights(m, X_train, x_query) @ coef``; the sum is pushed
    through the linear map first, so memory stays at one training-length vector.
    """
    if m.family != "gaussian":
        raise ValueError("hat weights are defined for linear refits only")
    Q, R = hat_basis(m, X_train) if basis is None else basis
    Bq = _model_block(m, x_query)
    Aq = np.column_stack([np.ones(Bq.shape[0]), (Bq - m.center) / m.scale])
    a = Aq.T @ np.asarray(coef, dtype=float)
    return Q @ solve_triangular(R, a, trans="T")
