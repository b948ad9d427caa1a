"""CSV ingestion, schema configuration and treatment discretization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DataError


@dataclass(frozen=True)
class Bin:
    lo: int
    hi: int | None
    label: str

    def contains(self, x):
        return x >= self.lo and (self.hi is None or x <= self.hi)


@dataclass(frozen=True)
class BinSpec:
    """Ordered, disjoint integer intervals ``lo <= x <= hi``; ``hi=None`` is open-ended."""

    bins: tuple

    def __post_init__(self):
        bins = tuple(b if isinstance(b, Bin) else Bin(**b) for b in self.bins)
        if not bins:
            raise ConfigError("no bins given")
        for a, b in zip(bins, bins[1:]):
            if a.hi is None:
                raise ConfigError("only the last bin may be open-ended")
            if b.lo <= a.hi:
                raise ConfigError("bins must be ordered and disjoint")
        for b in bins:
            if b.hi is not None and b.hi < b.lo:
                raise ConfigError(f"bin {b.label!r} has hi < lo")
        object.__setattr__(self, "bins", bins)

    @property
    def labels(self):
        return [b.label for b in self.bins]

    @classmethod
    def from_json(cls, items):
        try:
            return cls(tuple(Bin(int(it["lo"]), None if it.get("hi") is None else int(it["hi"]),
                                 str(it["label"])) for it in items))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed bins entry: {exc}") from None


# Days of musical practice per month, split into No / Low / Med / High.
PRACTICE_BINS = BinSpec((Bin(0, 0, "No"), Bin(1, 7, "Low"), Bin(8, 22, "Med"),
                         Bin(23, None, "High")))


def discretize_treatment(raw, bins):
    """Map raw integer intensities to bin positions ``0..T``."""
    raw = np.asarray(raw)
    out = np.empty(raw.shape[0], dtype=int)
    for i, x in enumerate(raw):
        for t, b in enumerate(bins.bins):
            if b.contains(x):
                out[i] = t
                break
        else:
            raise DataError(f"value outside bins: {x!r} at row {i}")
    return out


# Keys of the config file that steer the run rather than describe the data.
RUN_KEYS = frozenset({"also_binary", "normalize_propensity", "max_active", "n_lambda",
                      "expansion"})


@dataclass(frozen=True)
class SchemaConfig:
    outcomes: tuple
    treatment: str
    covariates: tuple
    continuous: tuple = ()
    forced: tuple = ()
    cluster: str | None = None
    bins: BinSpec | None = None
    standardize_outcomes: bool = False
    unit_id: str | None = None

    def __post_init__(self):
        for nm in ("outcomes", "covariates", "continuous", "forced"):
            object.__setattr__(self, nm, tuple(getattr(self, nm)))
        if not self.outcomes:
            raise ConfigError("at least one outcome column is required")
        if not self.covariates and not self.forced:
            raise ConfigError("at least one covariate column is required")
        roles = [("outcomes", set(self.outcomes)), ("treatment", {self.treatment}),
                 ("covariates", set(self.all_covariates))]
        if self.cluster:
            roles.append(("cluster", {self.cluster}))
        if self.unit_id:
            roles.append(("unit_id", {self.unit_id}))
        for (a, sa), (b, sb) in ((x, y) for i, x in enumerate(roles) for y in roles[i + 1:]):
            both = sa & sb
            if both:
                raise ConfigError(f"columns {sorted(both)} appear in both {a} and {b}")
        bad = set(self.continuous) - set(self.covariates)
        if bad:
            raise ConfigError(f"continuous columns not among covariates: {sorted(bad)}")
        if set(self.continuous) & set(self.forced):
            raise ConfigError("forced columns cannot be continuous")

    @property
    def all_covariates(self):
        extra = [f for f in self.forced if f not in self.covariates]
        return tuple(self.covariates) + tuple(extra)

    @classmethod
    def from_dict(cls, doc):
        """Schema from a parsed config; run-level keys are accepted and ignored here."""
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {"outcomes", "treatment", "covariates", "continuous", "forced", "cluster",
                 "bins", "standardize_outcomes", "unit_id"}
        stray = sorted(set(doc) - known - RUN_KEYS)
        if stray:
            raise ConfigError(f"unknown config field(s): {stray}")
        try:
            kwargs = {k: doc[k] for k in known if k in doc}
            if "outcomes" not in kwargs or "treatment" not in kwargs:
                raise ConfigError("config requires 'outcomes' and 'treatment'")
            if isinstance(kwargs["outcomes"], str):
                kwargs["outcomes"] = [kwargs["outcomes"]]
            if kwargs.get("bins") is not None:
                kwargs["bins"] = BinSpec.from_json(kwargs["bins"])
            kwargs["standardize_outcomes"] = bool(kwargs.get("standardize_outcomes", False))
            kwargs.setdefault("covariates", ())
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from None

    @classmethod
    def from_json(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self):
        return {
            "outcomes": list(self.outcomes),
            "treatment": self.treatment,
            "covariates": list(self.covariates),
            "continuous": list(self.continuous),
            "forced": list(self.forced),
            "cluster": self.cluster,
            "unit_id": self.unit_id,
            "bins": None if self.bins is None else [
                {"lo": b.lo, "hi": b.hi, "label": b.label} for b in self.bins.bins],
            "standardize_outcomes": self.standardize_outcomes,
        }


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated estimation sample. Arrays are read-only."""

    outcomes: np.ndarray
    outcome_names: tuple
    treatment: np.ndarray
    treatment_labels: tuple
    covariates: np.ndarray
    covariate_names: tuple
    cluster_id: np.ndarray
    unit_id: np.ndarray
    continuous: tuple = ()
    forced: tuple = ()

    def __post_init__(self):
        for nm in ("outcomes", "treatment", "covariates", "cluster_id", "unit_id"):
            arr = np.array(getattr(self, nm))
            arr.setflags(write=False)
            object.__setattr__(self, nm, arr)
        n = self.treatment.shape[0]
        if n < 2:
            raise DataError("a dataset needs at least two rows")
        if self.outcomes.ndim != 2 or self.outcomes.shape[0] != n:
            raise DataError("outcomes must be an n x q matrix")
        if self.covariates.ndim != 2 or self.covariates.shape[0] != n:
            raise DataError("covariates must be an n x m matrix")
        if self.cluster_id.shape[0] != n or self.unit_id.shape[0] != n:
            raise DataError("identifier columns must have one entry per row")
        check_treatment_labels(self.treatment)

    @property
    def n(self):
        return int(self.treatment.shape[0])

    @property
    def T(self):
        return int(self.treatment.max())

    def indicator(self, t):
        return (self.treatment == t).astype(float)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.outcome_names == other.outcome_names
                and self.covariate_names == other.covariate_names
                and self.treatment_labels == other.treatment_labels
                and self.continuous == other.continuous and self.forced == other.forced
                and np.array_equal(self.outcomes, other.outcomes)
                and np.array_equal(self.treatment, other.treatment)
                and np.array_equal(self.covariates, other.covariates)
                and np.array_equal(self.cluster_id, other.cluster_id)
                and np.array_equal(self.unit_id, other.unit_id))

    def binary(self):
        """Collapse to any-versus-none: label 0 stays 0, every other label becomes 1."""
        lab = (self.treatment > 0).astype(int)
        names = (self.treatment_labels[0], "any")
        return Dataset(self.outcomes, self.outcome_names, lab, names, self.covariates,
                       self.covariate_names, self.cluster_id, self.unit_id,
                       self.continuous, self.forced)


def check_treatment_labels(labels):
    labels = np.asarray(labels)
    values, counts = np.unique(labels, return_counts=True)
    if values.size < 2:
        raise DataError("treatment must take at least two values")
    if values[0] != 0 or not np.array_equal(values, np.arange(values.size)):
        raise DataError(f"non-contiguous treatment labels: {values.tolist()}")
    thin = values[counts < 2]
    if thin.size:
        raise DataError(f"treatment category {int(thin[0])} has fewer than 2 units")


def _parse_float(cell, row, col):
    if cell.strip() == "":
        raise DataError(f"missing value at (row {row}, col {col!r})")
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"non-numeric value {cell!r} at (row {row}, col {col!r})") from None
    if not np.isfinite(v):
        raise DataError(f"non-finite value at (row {row}, col {col!r})")
    return v


def load_dataset(path, config):
    """Read a UTF-8, comma-separated CSV with header into a validated :class:`Dataset`.

    ``config`` is a :class:`SchemaConfig`, a mapping or the path of a JSON file.
    """
    if isinstance(config, (str, Path)):
        config = SchemaConfig.from_json(config)
    elif not isinstance(config, SchemaConfig):
        config = SchemaConfig.from_dict(config)
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("data file is empty") from None
        rows = [r for r in reader if r]
    pos = {nm.strip(): i for i, nm in enumerate(header)}
    needed = list(config.outcomes) + [config.treatment] + list(config.all_covariates)
    needed += [c for c in (config.cluster, config.unit_id) if c]
    unknown = [nm for nm in needed if nm not in pos]
    if unknown:
        raise ConfigError(f"unknown column(s): {unknown}")
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DataError(f"row {r} has {len(row)} fields, header has {len(header)}")

    def numeric(names):
        out = np.empty((len(rows), len(names)))
        for j, nm in enumerate(names):
            c = pos[nm]
            for r, row in enumerate(rows):
                out[r, j] = _parse_float(row[c], r + 1, nm)
        return out

    def text(nm):
        c = pos[nm]
        vals = []
        for r, row in enumerate(rows):
            if row[c].strip() == "":
                raise DataError(f"missing value at (row {r + 1}, col {nm!r})")
            vals.append(row[c].strip())
        return np.asarray(vals, dtype=object)

    Y = numeric(config.outcomes)
    raw = numeric([config.treatment])[:, 0]
    X = numeric(config.all_covariates)
    if np.any(raw != np.round(raw)):
        raise DataError("treatment column must hold integers")
    raw = raw.astype(int)
    if config.bins is not None:
        treat = discretize_treatment(raw, config.bins)
        labels = tuple(config.bins.labels)
        check_treatment_labels(treat)
    else:
        check_treatment_labels(raw)
        treat = raw
        labels = tuple(str(t) for t in range(int(raw.max()) + 1))
    cont = set(config.continuous)
    for j, nm in enumerate(config.all_covariates):
        if nm not in cont and not np.all((X[:, j] == 0.0) | (X[:, j] == 1.0)):
            raise DataError(f"binary covariate {nm!r} has values other than 0/1")
    if config.standardize_outcomes:
        Y = standardize_columns(Y, config.outcomes)
    n = len(rows)
    cluster = text(config.cluster) if config.cluster else np.asarray(
        [str(i) for i in range(n)], dtype=object)
    unit = text(config.unit_id) if config.unit_id else np.asarray(
        [str(i + 1) for i in range(n)], dtype=object)
    return Dataset(Y, tuple(config.outcomes), treat, labels, X, tuple(config.all_covariates),
                   cluster, unit, tuple(config.continuous), tuple(config.forced))


def standardize_columns(Y, names=None):
    """Center and scale to unit population variance (divisor ``n``)."""
    Y = np.asarray(Y, dtype=float)
    sd = Y.std(axis=0)
    if np.any(sd == 0):
        bad = [names[j] if names else j for j in np.flatnonzero(sd == 0)]
        raise DataError(f"cannot standardize constant outcome(s): {bad}")
    return (Y - Y.mean(axis=0)) / sd


def write_dataset(dataset, path):
    """Write ``dataset`` as CSV and return the :class:`SchemaConfig` that reloads it."""
    outcome_cols = list(dataset.outcome_names)
    cov = list(dataset.covariate_names)
    header = ["unit_id", "cluster_id"] + outcome_cols + ["treatment"] + cov
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for i in range(dataset.n):
            row = [dataset.unit_id[i], dataset.cluster_id[i]]
            row += [repr(float(v)) for v in dataset.outcomes[i]]
            row += [int(dataset.treatment[i])]
            row += [repr(float(v)) for v in dataset.covariates[i]]
            out.writerow(row)
    labels = BinSpec(tuple(Bin(t, t, str(lab)) for t, lab in enumerate(dataset.treatment_labels)))
    return SchemaConfig(outcomes=outcome_cols, treatment="treatment", covariates=cov, bins=labels,
                        continuous=dataset.continuous, forced=dataset.forced,
                        cluster="cluster_id", unit_id="unit_id")


@dataclass
class ValidationReport:
    n: int
    n_treatments: int
    counts: dict
    n_clusters: int
    columns: list = field(default_factory=list)

    def as_dict(self):
        return {"n": self.n, "n_treatments": self.n_treatments,
                "counts": {str(k): v for k, v in self.counts.items()},
                "n_clusters": self.n_clusters, "columns": self.columns}


def validate_dataset(d):
    """Summary counts per treatment level, cluster count and per-column statistics."""
    values, counts = np.unique(d.treatment, return_counts=True)
    cols = []
    for name, x in zip(d.outcome_names + d.covariate_names,
                       np.column_stack([d.outcomes, d.covariates]).T):
        cols.append({"name": name, "mean": float(x.mean()), "sd": float(x.std()),
                     "min": float(x.min()), "max": float(x.max())})
    return ValidationReport(d.n, int(values.size),
                            {int(v): int(c) for v, c in zip(values, counts)},
                            int(np.unique(d.cluster_id).size), cols)
