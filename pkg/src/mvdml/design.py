"""Candidate-control expansion and pruning.

Base covariates are expanded with all pairwise products and with powers of
the continuous columns, then pruned: nearly empty 0/1 interaction cells,
constant columns, and near-duplicates (one survivor per group of columns
whose absolute correlation exceeds a threshold).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigError, DataError

_KIND_ORDER = {"base": 0, "interaction": 1, "polynomial": 2}


@dataclass(frozen=True)
class ColumnMeta:
    name: str
    kind: str = "base"
    parents: tuple = ()
    degree: int = 1
    penalized: bool = True
    continuous: bool = False

    @property
    def provenance(self) -> str:
        if self.kind == "base":
            return "base"
        if self.kind == "interaction":
            return f"interaction({self.parents[0]},{self.parents[1]})"
        return f"polynomial({self.parents[0]},{self.degree})"


@dataclass
class DesignMatrix:
    """Expanded covariate matrix with per-column metadata.

    The intercept is not stored; fitters add their own.
    """

    values: np.ndarray
    columns: list
    dropped: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise ValueError("values and column metadata disagree")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("column names must be unique")

    @property
    def shape(self):
        return self.values.shape

    @property
    def names(self):
        return [c.name for c in self.columns]

    @property
    def penalized(self):
        return np.array([c.penalized for c in self.columns], dtype=bool)

    def index_of(self, names):
        lookup = {c.name: i for i, c in enumerate(self.columns)}
        try:
            return np.array([lookup[nm] for nm in names], dtype=int)
        except KeyError as exc:
            raise DataError(f"design lacks column {exc.args[0]!r}") from None

    def subset(self, keep, reason=None):
        keep = np.asarray(keep, dtype=int)
        dropped = list(self.dropped)
        if reason is not None:
            gone = np.setdiff1d(np.arange(len(self.columns)), keep)
            dropped.extend((self.columns[j], reason) for j in gone)
        return DesignMatrix(self.values[:, keep], [self.columns[j] for j in keep], dropped)

    def rows(self, index):
        return DesignMatrix(self.values[index], list(self.columns), list(self.dropped))

    def write_ledger(self, path):
        """CSV of every candidate column: name, provenance, penalized, retained, drop_reason."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["name", "provenance", "penalized", "retained", "drop_reason"])
            for c in self.columns:
                out.writerow([c.name, c.provenance, int(c.penalized), 1, ""])
            for c, reason in self.dropped:
                out.writerow([c.name, c.provenance, int(c.penalized), 0, reason])


def column_values(meta, base, base_names):
    """Recompute one column from the base covariates using its provenance."""
    pos = {nm: i for i, nm in enumerate(base_names)}
    if meta.kind == "base":
        return base[:, pos[meta.name]].astype(float)
    if meta.kind == "interaction":
        a, b = meta.parents
        return base[:, pos[a]] * base[:, pos[b]]
    return base[:, pos[meta.parents[0]]] ** meta.degree


def expand_design(covariates, meta, max_interaction_order=2, poly_degree=4):
    """All base columns, pairwise products and powers ``2..poly_degree``.

    Unpenalized (forced) base columns are carried over as they are and take
    no part in interactions or powers. Column order is base, then
    interactions in lexicographic parent order, then powers by parent and
    degree.
    """
    X = np.asarray(covariates, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(meta):
        raise DataError("covariate matrix does not match its column metadata")
    if not np.all(np.isfinite(X)):
        raise DataError("covariates contain non-finite values")
    if max_interaction_order not in (1, 2):
        raise ConfigError("only first- and second-order interactions are supported")
    if not 1 <= int(poly_degree) <= 4:
        raise ConfigError("polynomial degree must be between 1 and 4")
    cols, blocks = list(meta), [X]
    free = [i for i, m in enumerate(meta) if m.penalized]
    if max_interaction_order == 2:
        pairs = list(combinations(free, 2))
        if pairs:
            a = np.array([i for i, _ in pairs])
            b = np.array([j for _, j in pairs])
            blocks.append(X[:, a] * X[:, b])
            cols.extend(ColumnMeta(f"{meta[i].name}*{meta[j].name}", "interaction",
                                   (meta[i].name, meta[j].name),
                                   continuous=meta[i].continuous or meta[j].continuous)
                        for i, j in pairs)
    for i in free:
        if not meta[i].continuous:
            continue
        for d in range(2, int(poly_degree) + 1):
            blocks.append(X[:, [i]] ** d)
            cols.append(ColumnMeta(f"{meta[i].name}^{d}", "polynomial", (meta[i].name,), d,
                                   continuous=True))
    return DesignMatrix(np.hstack(blocks), cols)


def _is_constant(x):
    return np.ptp(x) <= 1e-12 * max(1.0, float(np.max(np.abs(x))))


def prune_cells(d, min_cell_frac=0.01, n=None):
    """Drop nearly empty 0/1 interaction cells, then constant columns.

    A 0/1-valued interaction column is removed when its count of ones is
    below ``min_cell_frac * n`` or above ``(1 - min_cell_frac) * n``.
    Interactions involving a continuous parent are exempt from the cell rule.
    """
    if not 0.0 <= min_cell_frac < 1.0:
        raise ConfigError("min_cell_frac must lie in [0, 1)")
    V = d.values
    n = V.shape[0] if n is None else int(n)
    lo, hi = min_cell_frac * n, (1.0 - min_cell_frac) * n
    keep, reasons = [], {}
    for j, c in enumerate(d.columns):
        x = V[:, j]
        if c.kind == "interaction" and np.all((x == 0.0) | (x == 1.0)):
            ones = float(x.sum())
            if ones < lo or ones > hi:
                reasons[j] = "empty cell"
                continue
        if _is_constant(x):
            reasons[j] = "constant"
            continue
        keep.append(j)
    dropped = list(d.dropped) + [(d.columns[j], r) for j, r in sorted(reasons.items())]
    out = d.subset(keep)
    out.dropped = dropped
    return out


def prune_correlated(d, threshold=0.99, block=256):
    """Keep one column from every group whose absolute correlation exceeds ``threshold``.

    Columns are scanned in their current order, forced (unpenalized) columns
    first; a column is dropped when it is correlated above the threshold with
    an already retained column. Forced columns are never dropped.
    Correlations are computed blockwise; decisions are made serially.
    """
    if not 0.0 < threshold <= 1.0:
        raise ConfigError("correlation threshold must lie in (0, 1]")
    V = d.values
    n, p = V.shape
    sd = V.std(axis=0)
    if np.any(sd <= 0):
        raise DataError("prune_correlated requires non-constant columns")
    Z = (V - V.mean(axis=0)) / sd
    forced = [j for j, c in enumerate(d.columns) if not c.penalized]
    order = forced + [j for j, c in enumerate(d.columns) if c.penalized]
    kept, reasons = [], {}
    for start in range(0, p, block):
        idx = order[start:start + block]
        Zb = Z[:, idx]
        prior = np.abs(Z[:, kept].T @ Zb / n) if kept else np.zeros((0, len(idx)))
        inner = np.abs(Zb.T @ Zb / n)
        kept_in_block = []
        for pos, j in enumerate(idx):
            is_forced = not d.columns[j].penalized
            hit = None
            if not is_forced:
                if prior.shape[0]:
                    k = int(np.argmax(prior[:, pos]))
                    if prior[k, pos] > threshold:
                        hit = kept[k]
                if hit is None:
                    for q in kept_in_block:
                        if inner[q, pos] > threshold:
                            hit = idx[q]
                            break
            if hit is None:
                kept_in_block.append(pos)
            else:
                reasons[j] = f"correlated with {d.columns[hit].name}"
        kept.extend(idx[q] for q in kept_in_block)
    keep = sorted(kept)
    out = d.subset(keep)
    out.dropped = list(d.dropped) + [(d.columns[j], r) for j, r in sorted(reasons.items())]
    return out


def mark_unpenalized(d, names):
    """Flag the named columns as unpenalized; other flags are left alone."""
    names = list(names)
    lookup = {c.name: i for i, c in enumerate(d.columns)}
    missing = [nm for nm in names if nm not in lookup]
    if missing:
        raise ConfigError(f"cannot leave unknown or pruned columns unpenalized: {missing}")
    flag = set(names)
    cols = [replace(c, penalized=False) if c.name in flag else c for c in d.columns]
    return DesignMatrix(d.values, cols, list(d.dropped))


def build_design(covariates, meta, poly_degree=4, min_cell_frac=0.01, corr_threshold=0.99):
    """Expand, then prune in the fixed order cells, constants, correlation."""
    d = expand_design(covariates, meta, 2, poly_degree)
    d = prune_cells(d, min_cell_frac)
    d = prune_correlated(d, corr_threshold)
    forced = [m.name for m in meta if not m.penalized]
    return mark_unpenalized(d, forced)


class DesignExpander(TransformerMixin, BaseEstimator):
    """Learn the pruned candidate-control set on training data and rebuild it on new rows.

    Parameters
    ----------
    continuous : sequence of int or str, optional
        Base columns eligible for powers.
    forced : sequence of int or str, optional
        Base columns left unpenalized; they are not expanded.
    feature_names : sequence of str, optional
        Names of the base columns; defaults to ``x0, x1, ...``.
    poly_degree : int, default=4
    min_cell_frac : float, default=0.01
    corr_threshold : float, default=0.99
    """

    def __init__(self, continuous=None, forced=None, feature_names=None, poly_degree=4,
                 min_cell_frac=0.01, corr_threshold=0.99):
        self.continuous = continuous
        self.forced = forced
        self.feature_names = feature_names
        self.poly_degree = poly_degree
        self.min_cell_frac = min_cell_frac
        self.corr_threshold = corr_threshold

    def _resolve(self, spec, names):
        if spec is None:
            return set()
        out = set()
        for s in spec:
            if isinstance(s, (int, np.integer)):
                out.add(names[int(s)])
            elif s in names:
                out.add(s)
            else:
                raise ConfigError(f"unknown base column {s!r}")
        return out

    def base_meta(self, n_features):
        names = (list(self.feature_names) if self.feature_names is not None
                 else [f"x{i}" for i in range(n_features)])
        if len(names) != n_features:
            raise ConfigError("feature_names does not match the number of columns")
        cont = self._resolve(self.continuous, names)
        forced = self._resolve(self.forced, names)
        return [ColumnMeta(nm, penalized=nm not in forced, continuous=nm in cont) for nm in names]

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        meta = self.base_meta(X.shape[1])
        self.design_ = build_design(X, meta, self.poly_degree, self.min_cell_frac,
                                    self.corr_threshold)
        self.base_names_ = [m.name for m in meta]
        self.columns_ = list(self.design_.columns)
        self.n_features_in_ = X.shape[1]
        return self

    def transform_design(self, X):
        check_is_fitted(self, "columns_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} base columns, got {X.shape[1]}")
        V = np.column_stack([column_values(c, X, self.base_names_) for c in self.columns_])
        return DesignMatrix(V, list(self.columns_))

    def transform(self, X):
        return self.transform_design(X).values

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "columns_")
        return np.asarray([c.name for c in self.columns_], dtype=object)

    @property
    def penalized_(self):
        check_is_fitted(self, "columns_")
        return np.array([c.penalized for c in self.columns_], dtype=bool)
