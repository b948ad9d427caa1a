"""Nuisance estimation, common support and efficient-score estimates."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm
from sklearn.base import BaseEstimator

from .cv import normalize_rule
from .design import ColumnMeta, build_design
from .exceptions import ConfigError, DataError, DMLError, NumericalError
from .postlasso import PostLassoClassifier, PostLassoRegressor

logger = logging.getLogger(__name__)


def task_seed(seed, *key):
    """Sub-seed for one model, derived from the run seed and the model identity."""
    words = [int(seed)] + [int(k) for k in key]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class NuisanceSet:
    """Nuisance predictions for every unit.

    ``propensity`` is ``n x (T+1)``; ``outcome_pred[j]`` is ``n x (T+1)`` for
    outcome ``j``. ``propensity_models[t]`` and ``outcome_models[j][t]`` hold
    the fitted estimators; outcome model ``(j, t)`` was trained on
    ``groups[t]`` (row indices with treatment ``t``).
    """

    propensity: np.ndarray
    outcome_pred: list
    propensity_models: list
    outcome_models: list
    groups: list
    rule: str
    normalized: bool = False

    @property
    def T(self):
        return self.propensity.shape[1] - 1

    def selected_counts(self):
        out = {"propensity": [m.n_selected_ for m in self.propensity_models]}
        for j, models in enumerate(self.outcome_models):
            out[f"outcome_{j}"] = [m.n_selected_ for m in models]
        return out


def _design_meta(dataset):
    cont, forced = set(dataset.continuous), set(dataset.forced)
    return [ColumnMeta(nm, penalized=nm not in forced, continuous=nm in cont)
            for nm in dataset.covariate_names]


def dataset_design(dataset, poly_degree=4, min_cell_frac=0.01, corr_threshold=0.99):
    """Expanded and pruned candidate controls of a dataset."""
    return build_design(dataset.covariates, _design_meta(dataset), poly_degree,
                        min_cell_frac, corr_threshold)


def _run_tasks(tasks, workers):
    if workers is None:
        workers = os.cpu_count() or 1
    workers = max(1, int(workers))
    if workers == 1:
        return [fn() for fn in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn) for fn in tasks]
        return [f.result() for f in futures]


def estimate_nuisances(dataset, design, rule="min", K=10, seed=0, *, workers=1,
                       normalize=False, **lasso):
    """Fit one-vs-rest logistic and per-group linear Post-Lasso nuisance models.

    Propensity model ``t`` uses the full sample with folds stratified by
    treatment; outcome model ``(j, t)`` uses the units with treatment ``t``
    and predicts for everyone. Every model gets its own fold seed derived
    from ``seed`` and the model identity, so results do not depend on the
    order in which the worker pool runs them.
    """
    rule = normalize_rule(rule)
    T = dataset.T
    groups = [np.flatnonzero(dataset.treatment == t) for t in range(T + 1)]
    for t, g in enumerate(groups):
        if g.size < K:
            raise DataError(f"treatment group {t} has {g.size} units, fewer than {K} folds")

    def prop_task(t):
        def run():
            m = PostLassoClassifier(rule=rule, n_folds=K, random_state=task_seed(seed, 0, t),
                                    **lasso)
            try:
                m.fit(design, (dataset.treatment == t).astype(int))
            except DMLError as exc:
                raise type(exc)(f"propensity model t={t}: {exc}") from exc
            return m
        return run

    def out_task(j, t):
        def run():
            m = PostLassoRegressor(rule=rule, n_folds=K, random_state=task_seed(seed, 1, j, t),
                                   **lasso)
            try:
                m.fit(design.rows(groups[t]), dataset.outcomes[groups[t], j])
            except DMLError as exc:
                raise type(exc)(f"outcome model {dataset.outcome_names[j]!r} t={t}: {exc}") \
                    from exc
            return m
        return run

    q = dataset.outcomes.shape[1]
    tasks = [prop_task(t) for t in range(T + 1)]
    tasks += [out_task(j, t) for j in range(q) for t in range(T + 1)]
    fitted = _run_tasks(tasks, workers)
    pmodels = fitted[:T + 1]
    omodels = [fitted[T + 1 + j * (T + 1): T + 1 + (j + 1) * (T + 1)] for j in range(q)]
    P = np.column_stack([m.predict_proba(design.values)[:, 1] for m in pmodels])
    if normalize:
        P = P / P.sum(axis=1, keepdims=True)
    if not np.all((P > 0) & (P < 1)):
        raise NumericalError("propensity predictions outside (0, 1)")
    preds = [np.column_stack([m.predict(design.values) for m in omodels[j]]) for j in range(q)]
    for t, m in enumerate(pmodels):
        logger.info("propensity t=%d lambda_index=%d selected=%d", t, m.lambda_index_,
                    m.n_selected_)
    return NuisanceSet(P, preds, pmodels, omodels, groups, rule, bool(normalize))


# -- common support --------------------------------------------------------

@dataclass(frozen=True)
class TrimRule:
    kind: str = "minmax"
    percentile: float = 0.0

    def __str__(self):
        return f"percentile:{self.percentile:g}" if self.kind == "percentile" else self.kind


def parse_trim(rule):
    """``minmax``, ``none`` or ``percentile:P`` with ``0 <= P < 50``."""
    if isinstance(rule, TrimRule):
        return rule
    s = str(rule).strip().lower()
    if s in ("minmax", "none"):
        return TrimRule(s)
    if s.startswith("percentile:"):
        try:
            p = float(s.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"trim: cannot parse percentile in {rule!r}") from None
        if not 0.0 <= p < 50.0:
            raise ConfigError(f"trim: percentile must lie in [0, 50), got {p:g}")
        return TrimRule("percentile", p)
    raise ConfigError(f"trim: unknown rule {rule!r}; expected minmax, percentile:P or none")


@dataclass
class TrimReport:
    rule: TrimRule
    kept: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def dropped_count(self):
        return int(self.kept.size - self.kept.sum())

    def dropped_by_group(self, treatment):
        return {int(t): int(np.sum(~self.kept[treatment == t]))
                for t in np.unique(treatment)}


def trim_common_support(propensity, treatment, rule="minmax"):
    """Keep units whose propensities lie within the overlap of all treatment groups.

    For each column ``t`` of ``propensity`` the lower bound is the largest
    group-wise low quantile and the upper bound the smallest group-wise high
    quantile; ``minmax`` uses minima and maxima, ``percentile:P`` the
    ``P``-th and ``(100-P)``-th percentiles. A unit is dropped when any of
    its propensities falls outside the bounds.
    """
    rule = parse_trim(rule)
    P = np.atleast_2d(np.asarray(propensity, dtype=float))
    if P.shape[0] == 1 and P.shape[1] > 1 and np.ndim(propensity) == 1:
        P = P.T
    treatment = np.asarray(treatment)
    if treatment.shape[0] != P.shape[0]:
        raise DataError("propensity and treatment disagree in length")
    n, m = P.shape
    if rule.kind == "none":
        return TrimReport(rule, np.ones(n, dtype=bool), np.zeros(m), np.ones(m))
    labels = np.unique(treatment)
    if rule.kind == "minmax":
        lows = np.array([P[treatment == g].min(axis=0) for g in labels])
        highs = np.array([P[treatment == g].max(axis=0) for g in labels])
    else:
        q = rule.percentile
        lows = np.array([np.percentile(P[treatment == g], q, axis=0) for g in labels])
        highs = np.array([np.percentile(P[treatment == g], 100.0 - q, axis=0) for g in labels])
    lower, upper = lows.max(axis=0), highs.min(axis=0)
    kept = np.all((P >= lower) & (P <= upper), axis=1)
    if not kept.any():
        raise DataError(f"common-support trimming ({rule}) removed every unit")
    return TrimReport(rule, kept, lower, upper)


# -- scores and variances ----------------------------------------------------

def efficient_score(y, d_t, mu_t, p_t):
    y, d_t, mu_t, p_t = (np.asarray(a, dtype=float) for a in (y, d_t, mu_t, p_t))
    if np.any(p_t <= 0):
        raise NumericalError("non-positive propensity in efficient score")
    return d_t * (y - mu_t) / p_t + mu_t


def potential_outcome(y, d_t, mu_t, p_t):
    """Efficient-score estimate of one average potential outcome.

    Returns
    -------
    mu_hat : float
    score : ndarray
        Per-unit score contributions; their mean is ``mu_hat``.
    """
    psi = efficient_score(y, d_t, mu_t, p_t)
    return float(psi.mean()), psi


def iid_variance(score, mu_hat=None):
    """Mean squared deviation of the score from its mean (divisor ``n``)."""
    score = np.asarray(score, dtype=float)
    if score.size == 0:
        raise DataError("empty score vector")
    mu = score.mean() if mu_hat is None else mu_hat
    return float(np.mean((score - mu) ** 2))


def clustered_variance(score, mu_hat, cluster_id):
    """``(1/N) sum_s (sum_{i in s} (psi_i - mu_hat))^2``."""
    score = np.asarray(score, dtype=float)
    cluster_id = np.asarray(cluster_id)
    if cluster_id.shape[0] != score.size:
        raise DataError("cluster ids do not cover the scored units")
    mu = score.mean() if mu_hat is None else mu_hat
    _, inv = np.unique(cluster_id, return_inverse=True)
    sums = np.bincount(inv, weights=score - mu)
    return float(np.sum(sums ** 2) / score.size)


def pairwise_effect(score_m, score_k):
    """Difference of two potential outcomes and the variance of the difference score."""
    diff = np.asarray(score_m, dtype=float) - np.asarray(score_k, dtype=float)
    gamma = float(diff.mean())
    return gamma, float(np.mean((diff - gamma) ** 2))


def stars(p):
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.10 else ""


@dataclass
class EffectRow:
    outcome: str
    contrast: str
    estimate: float
    se_iid: float
    se_clustered: float
    n_used: int
    m: int
    k: int | None = None

    @property
    def p_value(self):
        se = self.se_clustered
        if not se > 0:
            return 1.0 if self.estimate == 0 else 0.0
        return float(2.0 * norm.sf(abs(self.estimate) / se))

    @property
    def stars(self):
        return stars(self.p_value)


@dataclass
class EffectTable:
    """Potential outcomes and all higher-minus-lower contrasts, per outcome.

    Scores are kept so that any ordered pair can be requested later.
    """

    rows: list
    scores: dict = field(repr=False)
    clusters: np.ndarray = field(repr=False, default=None)
    labels: tuple = ()

    def contrast(self, outcome, m, k):
        """Effect ``mu_m - mu_k``; swapping ``m`` and ``k`` negates the estimate."""
        psi = self.scores[outcome]
        gamma, v = pairwise_effect(psi[:, m], psi[:, k])
        n = psi.shape[0]
        vc = clustered_variance(psi[:, m] - psi[:, k], gamma, self.clusters)
        return EffectRow(outcome, f"{self.labels[m]}-{self.labels[k]}", gamma, np.sqrt(v / n),
                         np.sqrt(vc / n), n, m, k)


def effect_table(outcome_names, scores, cluster_id, labels):
    """Assemble an :class:`EffectTable` from per-outcome ``n x (T+1)`` score matrices."""
    rows = []
    score_map = {}
    for name, psi in zip(outcome_names, scores):
        psi = np.asarray(psi, dtype=float)
        score_map[name] = psi
        n, T1 = psi.shape
        for t in range(T1):
            mu = float(psi[:, t].mean())
            rows.append(EffectRow(name, f"mu_{labels[t]}", mu,
                                  np.sqrt(iid_variance(psi[:, t], mu) / n),
                                  np.sqrt(clustered_variance(psi[:, t], mu, cluster_id) / n),
                                  n, t))
    table = EffectTable([], score_map, np.asarray(cluster_id), tuple(labels))
    for name in outcome_names:
        T1 = score_map[name].shape[1]
        pos = [r for r in rows if r.outcome == name]
        contrasts = [table.contrast(name, m, k) for k in range(T1) for m in range(k + 1, T1)]
        table.rows.extend(pos + contrasts)
    return table


# -- estimator -------------------------------------------------------------

class MultivaluedDML(BaseEstimator):
    """Efficient-score estimator of potential-outcome means for a multivalued treatment.

    Parameters
    ----------
    rule : {"min", "1se", "1se_plus", "2se_plus"}, default="min"
    n_folds : int, default=10
    trim : str, default="minmax"
        ``minmax``, ``percentile:P`` or ``none``.
    normalize_propensity : bool, default=False
        Rescale one-vs-rest propensities to sum to one per unit.
    max_active : int, default=500
    n_lambda : int, default=100
    patience : int, optional
    poly_degree, min_cell_frac, corr_threshold
        Candidate-control expansion settings.
    random_state : int, default=0
    n_jobs : int, default=1
        Worker threads for the nuisance fits; results do not depend on it.

    Attributes
    ----------
    design_ : DesignMatrix
    nuisances_ : NuisanceSet
    trim_ : TrimReport
    scores_ : list of ndarray
        Per outcome, ``n_kept x (T+1)`` efficient scores.
    effects_ : EffectTable
    weights_ : list of list of WeightSet
        ``weights_[j][t]``, verified against the point estimates.
    """

    def __init__(self, rule="min", n_folds=10, trim="minmax", normalize_propensity=False,
                 max_active=500, n_lambda=100, patience=None, poly_degree=4,
                 min_cell_frac=0.01, corr_threshold=0.99, random_state=0, n_jobs=1):
        self.rule = rule
        self.n_folds = n_folds
        self.trim = trim
        self.normalize_propensity = normalize_propensity
        self.max_active = max_active
        self.n_lambda = n_lambda
        self.patience = patience
        self.poly_degree = poly_degree
        self.min_cell_frac = min_cell_frac
        self.corr_threshold = corr_threshold
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, dataset, design=None):
        from .diagnostics import dml_weights

        rule = normalize_rule(self.rule)
        trim = parse_trim(self.trim)
        if design is None:
            design = dataset_design(dataset, self.poly_degree, self.min_cell_frac,
                                    self.corr_threshold)
        self.design_ = design
        self.nuisances_ = estimate_nuisances(
            dataset, design, rule, self.n_folds, self.random_state, workers=self.n_jobs,
            normalize=self.normalize_propensity, max_active=self.max_active,
            n_lambda=self.n_lambda, patience=self.patience)
        nu = self.nuisances_
        self.trim_ = trim_common_support(nu.propensity, dataset.treatment, trim)
        kept = self.trim_.kept
        T = dataset.T
        D = np.column_stack([dataset.treatment[kept] == t for t in range(T + 1)]).astype(float)
        P = nu.propensity[kept]
        self.scores_ = []
        for j in range(dataset.outcomes.shape[1]):
            y = dataset.outcomes[kept, j]
            mu = nu.outcome_pred[j][kept]
            self.scores_.append(np.column_stack([
                efficient_score(y, D[:, t], mu[:, t], P[:, t]) for t in range(T + 1)]))
        self.effects_ = effect_table(dataset.outcome_names, self.scores_,
                                     dataset.cluster_id[kept], dataset.treatment_labels)
        self.weights_ = [[dml_weights(dataset, design, nu, self.trim_, j, t,
                                      float(self.scores_[j][:, t].mean()))
                          for t in range(T + 1)] for j in range(dataset.outcomes.shape[1])]
        return self
