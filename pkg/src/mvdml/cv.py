"""K-fold cross-validation of Post-Lasso and penalty selection rules."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import DMLError, DataError
from .lasso import (PenaltyGrid, _as_matrix, _as_response, _independent_columns,
                    _PathProblem, post_lasso_refit, predict)

logger = logging.getLogger(__name__)

RULES = ("min", "1se", "1se_plus", "2se_plus")
_RULE_ALIASES = {"1se+": "1se_plus", "2se+": "2se_plus", "1seplus": "1se_plus",
                 "2seplus": "2se_plus"}


def normalize_rule(rule: str) -> str:
    r = _RULE_ALIASES.get(str(rule).lower(), str(rule).lower())
    if r not in RULES:
        raise ValueError(f"unknown penalty rule {rule!r}; expected one of {RULES}")
    return r


@dataclass(frozen=True)
class FoldAssignment:
    fold_id: np.ndarray
    K: int
    seed: int

    def train_test(self, k):
        """Boolean masks for training and held-out units of fold ``k`` (1-based)."""
        test = self.fold_id == k
        return ~test, test


@dataclass
class CvResult:
    """Per-fold held-out MSE over a penalty grid.

    ``per_fold_mse`` is ``K x M``; entries that were not evaluated or whose
    refit failed are NaN and the grid point is then excluded from selection
    through ``valid``.
    """

    grid: PenaltyGrid
    per_fold_mse: np.ndarray
    mean_mse: np.ndarray
    se_mse: np.ndarray
    active_counts: np.ndarray
    fold_active_counts: np.ndarray
    valid: np.ndarray
    stopped_at: int | None = None
    failures: list = field(default_factory=list)

    @property
    def lambdas(self):
        return self.grid.lambdas

    @property
    def K(self):
        return self.per_fold_mse.shape[0]


def assign_folds(n, K=10, strata=None, seed=0):
    """Seeded, stratified round-robin fold assignment.

    Units of each stratum are permuted and dealt into folds ``1..K``. The
    dealing position carries over from one stratum to the next so overall
    fold sizes stay balanced too. Strata with fewer than ``K`` members are
    pooled and dealt together as one stratum.
    """
    n = int(n)
    K = int(K)
    if K < 2:
        raise ValueError("need at least two folds")
    if K > n:
        raise ValueError(f"cannot split {n} units into {K} folds")
    if strata is None:
        groups = [np.arange(n)]
    else:
        strata = np.asarray(strata)
        if strata.shape[0] != n:
            raise ValueError("strata must have one label per unit")
        labels, inverse = np.unique(strata, return_inverse=True)
        groups, small = [], []
        for g in range(labels.size):
            members = np.flatnonzero(inverse == g)
            (groups if members.size >= K else small).append(members)
        if small:
            groups.append(np.sort(np.concatenate(small)))
    rng = np.random.default_rng(seed)
    fold_id = np.zeros(n, dtype=int)
    offset = 0
    for members in groups:
        perm = rng.permutation(members)
        fold_id[perm] = (offset + np.arange(perm.size)) % K + 1
        offset = (offset + perm.size) % K
    return FoldAssignment(fold_id, K, int(seed))


class _GaussianRefitter:
    """Least-squares Post-Lasso refits sharing one growing Gram matrix.

    Operates on the fold's standardized training matrix so that every refit
    along a path costs a small Cholesky solve instead of a fresh factorization
    of the data.
    """

    def __init__(self, Z, y, rank_tol=1e-10):
        self.Z = Z
        self.n = Z.shape[0]
        self.ybar = float(y.mean())
        self.zty = Z.T @ (y - self.ybar) / self.n
        self.pos = {}
        self.order = []
        self.G = np.zeros((0, 0))
        self.rank_tol = rank_tol

    def _ensure(self, cols):
        new = [int(j) for j in cols if int(j) not in self.pos]
        if not new:
            return
        Zn = self.Z[:, new]
        cross = self.Z[:, self.order].T @ Zn / self.n if self.order else np.zeros((0, len(new)))
        block = Zn.T @ Zn / self.n
        m = len(self.order)
        G = np.empty((m + len(new), m + len(new)))
        G[:m, :m] = self.G
        G[:m, m:] = cross
        G[m:, :m] = cross.T
        G[m:, m:] = block
        self.G = G
        for j in new:
            self.pos[j] = len(self.order)
            self.order.append(j)

    def fit(self, cols):
        cols = np.asarray(cols, dtype=int)
        if cols.size == 0:
            return cols, np.empty(0)
        self._ensure(cols)
        p = np.asarray([self.pos[int(j)] for j in cols])
        G = self.G[np.ix_(p, p)]
        keep = _independent_columns(G, self.rank_tol)
        G = G[np.ix_(keep, keep)]
        b = cho_solve(cho_factor(G), self.zty[cols[keep]])
        return cols[keep], b


def _fold_mse(y, yhat):
    return float(np.mean((y - yhat) ** 2))


def cross_validate_post_lasso(X, y, family, grid, folds, penalized=None, *, patience=None,
                              band=2.0, **solver):
    """Cross-validated held-out MSE of Post-Lasso at every grid point.

    For each fold the lasso path is fit on the remaining folds, the active
    set at each penalty is refit without penalty (least squares or logit) on
    the same training units, and the refit predicts the held-out fold. The
    binomial loss is the squared error between the 0/1 response and the
    predicted probability.

    Folds advance along the grid in lock-step. With ``patience`` set, the
    scan stops once the mean curve has stayed above ``min + band * SE(min)``
    for ``patience`` consecutive grid points; remaining points are marked
    invalid. ``patience=None`` evaluates the whole grid.
    """
    X = _as_matrix(X)
    n, p = X.shape
    y = _as_response(y, n, family)
    if not isinstance(grid, PenaltyGrid):
        grid = PenaltyGrid(grid)
    fold_id = folds.fold_id if isinstance(folds, FoldAssignment) else np.asarray(folds)
    if fold_id.shape[0] != n:
        raise ValueError("fold assignment does not match the number of units")
    ks = np.unique(fold_id)
    K, M = ks.size, len(grid)
    pen = np.ones(p, dtype=bool) if penalized is None else np.asarray(
        getattr(penalized, "penalized", penalized), dtype=bool)
    forced = np.flatnonzero(~pen)

    states = []
    for k in ks:
        test = fold_id == k
        train = ~test
        prob = _PathProblem(X[train], y[train], family, pen, **solver)
        st = {"prob": prob, "test": test, "train": train, "key": None, "mse": np.nan,
              "refit": None}
        if family == "gaussian":
            st["refitter"] = _GaussianRefitter(prob.Z, prob.y)
            st["Ztest"] = (X[test] - prob.center) / prob.scale
            st["Ztest"][:, ~prob.usable] = 0.0
        states.append(st)

    per_fold = np.full((K, M), np.nan)
    fold_counts = np.full((K, M), -1, dtype=int)
    failures = []
    best, best_se, strikes = np.inf, 0.0, 0
    stopped = None
    for m, lam in enumerate(grid.lambdas):
        for f, st in enumerate(states):
            prob = st["prob"]
            try:
                prob.step(float(lam))
            except DMLError as exc:
                failures.append((f + 1, m, str(exc)))
                st["key"] = None
                continue
            active = prob.active()
            fold_counts[f, m] = active.size
            key = tuple(active.tolist())
            if key != st["key"]:
                cols = np.union1d(active, forced[prob.usable[forced]]) if forced.size else active
                try:
                    st["mse"] = _refit_mse(st, family, X, y, cols, forced)
                except DMLError as exc:
                    failures.append((f + 1, m, str(exc)))
                    st["key"] = None
                    continue
                st["key"] = key
            per_fold[f, m] = st["mse"]
        col = per_fold[:, m]
        if patience is not None and np.all(np.isfinite(col)):
            mean = col.mean()
            if mean < best:
                best, best_se, strikes = mean, np.std(col, ddof=1) / np.sqrt(K), 0
            elif mean > best + band * best_se:
                strikes += 1
                if strikes >= patience:
                    stopped = m
                    break
            else:
                strikes = 0
    for fk, m, msg in failures:
        logger.warning("cv refit failure fold=%d grid=%d: %s", fk, m, msg)
    valid = np.all(np.isfinite(per_fold), axis=0)
    with np.errstate(invalid="ignore"):
        mean_mse = np.where(valid, np.nanmean(np.where(valid, per_fold, 0.0), axis=0), np.nan)
        se_mse = np.where(valid, np.std(np.where(valid, per_fold, 0.0), axis=0, ddof=1) / np.sqrt(K),
                          np.nan)
    counts = (np.asarray(grid.active_counts) if grid.active_counts is not None
              else np.round(np.where(fold_counts >= 0, fold_counts, 0).mean(axis=0)).astype(int))
    return CvResult(grid, per_fold, mean_mse, se_mse, counts, fold_counts, valid, stopped, failures)


def _refit_mse(st, family, X, y, cols, forced):
    test = st["test"]
    if family == "gaussian":
        kept, b = st["refitter"].fit(cols)
        yhat = st["refitter"].ybar + st["Ztest"][:, kept] @ b
        return _fold_mse(y[test], yhat)
    # refit on the selected columns only; indices in the refit are local to ``cols``
    train = st["train"]
    cols = np.asarray(cols, dtype=int)
    start = None
    prev = st["refit"]
    if prev is not None:
        warm = dict(zip(prev[0][prev[1].columns].tolist(),
                        (prev[1].coefficients * prev[1].scale).tolist()))
        start = {pos: warm[j] for pos, j in enumerate(cols.tolist()) if j in warm}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        refit = post_lasso_refit(X[np.ix_(train, cols)], y[train], "binomial",
                                 np.arange(cols.size), None, start=start)
    st["refit"] = (cols, refit)
    return _fold_mse(y[test], predict(refit, X[np.ix_(test, cols)]))


def select_lambda(cv: CvResult, rule="min") -> int:
    """Grid index chosen by the ``min``, ``1se``, ``1se_plus`` or ``2se_plus`` rule.

    ``min`` is the first index attaining the smallest mean CV error. The SE
    rules walk away from it, toward larger penalties for ``1se`` and toward
    smaller penalties for the ``plus`` rules, and keep the last index whose
    mean error stays within ``c * SE(min)`` of the minimum, stopping at the
    first point outside the band. Invalid grid points are skipped.
    """
    rule = normalize_rule(rule)
    valid = np.asarray(cv.valid, dtype=bool)
    if not np.any(valid):
        raise DataError("no valid grid point to select a penalty from")
    curve = np.where(valid, cv.mean_mse, np.inf)
    i_min = int(np.argmin(curve))
    if rule == "min":
        return i_min
    c = 1.0 if rule in ("1se", "1se_plus") else 2.0
    bound = cv.mean_mse[i_min] + c * cv.se_mse[i_min]
    step = -1 if rule == "1se" else 1
    chosen = i_min
    i = i_min + step
    while 0 <= i < curve.size:
        if valid[i]:
            if cv.mean_mse[i] <= bound:
                chosen = i
            else:
                break
        i += step
    return chosen
