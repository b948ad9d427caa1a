"""Synthetic data with known effects, and brute-force reference solvers.

The reference solvers are deliberately simple and independent of the
production code paths: normal equations instead of QR, accelerated
proximal gradient instead of coordinate descent, and explicit
leave-one-out refits instead of the lock-step fold machinery.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset_io import Dataset
from .exceptions import ConfigError, ConvergenceError, NumericalError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DgpSpec:
    """Synthetic design with a sparse set of confounders.

    ``levels[t]`` is the outcome shift of treatment ``t``; true effects are
    their differences. Treatment follows a multinomial logit on the first
    ``s`` covariates with coefficient matrix ``confounding * treatment_coef``;
    the outcome is linear in the same covariates with coefficients
    ``outcome_coef``. Noise has a random cluster intercept whose share of
    the noise variance is ``cluster_corr``.
    """

    n: int = 2000
    p_base: int = 50
    n_binary: int = 10
    T: int = 3
    s: int = 5
    confounding: float = 1.0
    levels: tuple = (0.0, 0.2, 0.35, 0.5)
    treatment_coef: tuple = ((0.6, -0.4, 0.3, 0.0, 0.4),
                             (0.2, 0.5, -0.4, 0.5, 0.0),
                             (-0.5, 0.3, 0.5, 0.4, -0.3))
    outcome_coef: tuple = (0.6, 0.5, 0.5, -0.5, 0.4)
    n_clusters: int = 20
    cluster_corr: float = 0.1
    noise: float = 1.0
    x_corr: float = 0.0
    seed: int = 0
    version: str = "reference-1"

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("need at least two treatment levels")
        if not 1 <= self.s <= self.p_base - self.n_binary:
            raise ConfigError("relevant covariates must be continuous and fit in p_base")
        if len(self.levels) != self.T + 1 or not np.all(np.isfinite(self.levels)):
            raise ConfigError("levels must give one finite shift per treatment")
        A = np.asarray(self.treatment_coef, dtype=float)
        if A.shape != (self.T, self.s):
            raise ConfigError(f"treatment_coef must be {self.T} x {self.s}")
        if len(self.outcome_coef) != self.s:
            raise ConfigError("outcome_coef must have s entries")
        if not 0.0 <= self.cluster_corr < 1.0 or not 0.0 <= self.x_corr < 1.0:
            raise ConfigError("correlations must lie in [0, 1)")
        if self.n_clusters < 1 or self.n_clusters > self.n:
            raise ConfigError("invalid number of clusters")

    @property
    def gamma(self):
        """True effect ``levels[m] - levels[k]`` for every ``m > k``."""
        L = self.levels
        return {(m, k): L[m] - L[k] for k in range(self.T + 1) for m in range(k + 1, self.T + 1)}

    def with_seed(self, seed):
        return DgpSpec(**{**asdict(self), "seed": int(seed)})


REFERENCE_DGP = DgpSpec()

_Z975 = 1.959963984540054


def _logits(spec, Xs):
    A = spec.confounding * np.asarray(spec.treatment_coef, dtype=float)
    return np.column_stack([np.zeros(Xs.shape[0]), Xs @ A.T])


def generate_dgp(spec: DgpSpec):
    """Draw one dataset.

    Returns
    -------
    dataset : Dataset
    truths : dict
        ``gamma`` (true contrasts), ``levels``, ``propensity`` (true
        probabilities) and ``outcome_sd`` (sample SD of the outcome).
    """
    rng = np.random.default_rng(spec.seed)
    n, p = spec.n, spec.p_base
    Z = rng.standard_normal((n, p))
    if spec.x_corr > 0:
        Z = np.sqrt(1.0 - spec.x_corr) * Z + np.sqrt(spec.x_corr) * rng.standard_normal((n, 1))
    n_cont = p - spec.n_binary
    X = Z.copy()
    X[:, n_cont:] = (Z[:, n_cont:] > 0).astype(float)
    Xs = X[:, :spec.s]
    logits = _logits(spec, Xs)
    prob = np.exp(logits - logits.max(axis=1, keepdims=True))
    prob /= prob.sum(axis=1, keepdims=True)
    if np.any(prob.mean(axis=0) < 5.0 / n):
        raise ConfigError("degenerate design: a treatment arm has expected share below 5/n")
    u = rng.random(n)
    D = (u[:, None] > np.cumsum(prob, axis=1)).sum(axis=1)
    D = np.minimum(D, spec.T)
    cluster = rng.permutation(np.arange(n) % spec.n_clusters)
    u_c = rng.standard_normal(spec.n_clusters)
    eps = (np.sqrt(spec.cluster_corr) * u_c[cluster]
           + np.sqrt(1.0 - spec.cluster_corr) * rng.standard_normal(n))
    Y = np.asarray(spec.levels)[D] + Xs @ np.asarray(spec.outcome_coef) + spec.noise * eps
    names = tuple(f"x{j}" for j in range(p))
    ds = Dataset(Y[:, None], ("y",), D, tuple(str(t) for t in range(spec.T + 1)), X, names,
                 np.asarray([f"c{c}" for c in cluster], dtype=object),
                 np.asarray([str(i + 1) for i in range(n)], dtype=object),
                 names[:n_cont], ())
    truths = {"gamma": spec.gamma, "levels": tuple(spec.levels), "propensity": prob,
              "outcome_sd": float(Y.std())}
    return ds, truths


# -- reference solvers -----------------------------------------------------

def direct_least_squares(X, y):
    """Normal-equation solution of ``min ||y - X b||^2``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    G = X.T @ X
    if np.linalg.cond(G) > 1e14:
        raise NumericalError("singular normal equations")
    return np.linalg.solve(G, X.T @ y)


def proximal_lasso_oracle(X, y, lam, penalized=None, tol=1e-13, max_iter=500000):
    """Accelerated proximal gradient for the gaussian lasso on standardized columns.

    Minimizes ``(1/2n) ||y - b0 - Z beta||^2 + lam * sum_pen |beta_j|`` with
    ``Z`` the columns centered and scaled to unit population variance. The
    intercept is profiled out by centering. Uses FISTA with function-value
    restarts and stops when the proximal-gradient step moves the iterate by
    less than ``tol`` in max norm.

    Returns
    -------
    intercept : float
    coefficients : ndarray
        On the original column scale; constant columns get 0.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    pen = np.ones(p, dtype=bool) if penalized is None else np.asarray(penalized, dtype=bool)
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    ok = scale > 1e-12 * np.maximum(1.0, np.abs(center))
    Z = np.zeros_like(X)
    Z[:, ok] = (X[:, ok] - center[ok]) / scale[ok]
    yc = y - y.mean()
    L = np.linalg.norm(Z, 2) ** 2 / n if ok.any() else 1.0
    step = 1.0 / L
    thr = np.where(pen, lam * step, 0.0)

    def f(b):
        r = yc - Z @ b
        return 0.5 * (r @ r) / n

    def obj(b):
        return f(b) + lam * np.abs(b[pen]).sum()

    def prox_grad(b):
        g = -(Z.T @ (yc - Z @ b)) / n
        v = b - step * g
        return np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)

    beta = np.zeros(p)
    z = beta.copy()
    tk = 1.0
    fo = obj(beta)
    for _ in range(max_iter):
        nb = prox_grad(z)
        fn = obj(nb)
        if fn > fo:
            z, tk = beta.copy(), 1.0
            nb = prox_grad(z)
            fn = obj(nb)
        moved = np.max(np.abs(nb - beta)) if p else 0.0
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        z = nb + ((tk - 1.0) / t_next) * (nb - beta)
        beta, fo, tk = nb, fn, t_next
        if moved < tol:
            break
    else:
        raise ConvergenceError("proximal gradient did not converge")
    coef = np.zeros(p)
    coef[ok] = beta[ok] / scale[ok]
    return float(y.mean() - coef @ center), coef


def loo_cv_oracle(X, y, lambdas, penalized=None):
    """Leave-one-out squared error of Post-Lasso at each penalty.

    Returns an ``n x len(lambdas)`` matrix: entry ``(i, m)`` is the squared
    prediction error for unit ``i`` of the least-squares refit on the lasso
    support computed without unit ``i``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    pen = np.ones(p, dtype=bool) if penalized is None else np.asarray(penalized, dtype=bool)
    out = np.empty((n, len(lambdas)))
    for i in range(n):
        tr = np.arange(n) != i
        for m, lam in enumerate(lambdas):
            _, coef = proximal_lasso_oracle(X[tr], y[tr], lam, pen)
            support = np.flatnonzero((coef != 0) | ~pen)
            sd = X[tr][:, support].std(axis=0)
            support = support[sd > 0]
            A = np.column_stack([np.ones(n - 1), X[tr][:, support]])
            b = direct_least_squares(A, y[tr])
            pred = b[0] + X[i, support] @ b[1:]
            out[i, m] = (y[i] - pred) ** 2
    return out


# -- Monte Carlo -----------------------------------------------------------

@dataclass
class MonteCarloResult:
    rows: list
    balance: list
    correlations: list
    outcome_sd: list
    runtime: float
    spec: DgpSpec
    settings: dict = field(default_factory=dict)
    identity_gaps: list = field(default_factory=list)

    def contrasts(self):
        return sorted({r["contrast"] for r in self.rows})

    def bias(self):
        """Per contrast: ``|mean(estimate) - truth|`` divided by the mean outcome SD."""
        sd = float(np.mean(self.outcome_sd))
        out = {}
        for c in self.contrasts():
            est = [r["estimate"] for r in self.rows if r["contrast"] == c]
            truth = next(r["true_gamma"] for r in self.rows if r["contrast"] == c)
            out[c] = abs(float(np.mean(est)) - truth) / sd
        return out

    def coverage(self, contrast=None):
        cov = [r["covered_95"] for r in self.rows if contrast is None or r["contrast"] == contrast]
        return float(np.mean(cov))

    def balance_improved_share(self):
        return float(np.mean([after < before for before, after in self.balance]))

    def mean_corr_w_wp(self):
        return float(np.mean(self.correlations))

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["rep", "contrast", "estimate", "se", "covered_95", "true_gamma"])
            for r in self.rows:
                out.writerow([r["rep"], r["contrast"], f"{r['estimate']:.6g}", f"{r['se']:.6g}",
                              int(r["covered_95"]), f"{r['true_gamma']:.6g}"])


def run_replication(spec, rep, seed, **estimator):
    """One draw and one fit for replication ``rep``.

    Returns a dict with the effect ``rows``, the mean largest |SD| over base
    covariates ``before`` and ``after`` weighting, ``corr_w_wp`` (correlation
    of total and inverse-probability weights averaged over treatments), the
    sample ``outcome_sd`` and the largest weighted-representation
    ``identity_gap``.
    """
    from .diagnostics import balance_report, weight_correlations
    from .dml import MultivaluedDML, task_seed

    ds, truths = generate_dgp(spec.with_seed(task_seed(seed, rep)))
    est = MultivaluedDML(random_state=task_seed(seed, rep, 1), **estimator).fit(ds)
    labels = ds.treatment_labels
    rows = []
    for (m, k), g in truths["gamma"].items():
        r = est.effects_.contrast("y", m, k)
        rows.append({"rep": rep, "contrast": f"{labels[m]}-{labels[k]}", "estimate": r.estimate,
                     "se": float(r.se_clustered),
                     "covered_95": bool(abs(r.estimate - g) <= _Z975 * r.se_clustered),
                     "true_gamma": g})
    ws = est.weights_[0]
    bal = balance_report(ds.covariates, ds.treatment, ws, ds.covariate_names)
    return {"rows": rows, "before": float(bal.sd_before.mean()),
            "after": float(bal.sd_after.mean()),
            "corr_w_wp": float(weight_correlations(ws)[0, 1]),
            "outcome_sd": truths["outcome_sd"],
            "identity_gap": max(w.identity_gap for w in ws)}


def _replication_task(args):
    spec, rep, seed, estimator = args
    return run_replication(spec, rep, seed, **estimator)


def run_monte_carlo(spec=REFERENCE_DGP, reps=200, seed=20240101, progress=None, workers=1,
                    **estimator):
    """Repeat :func:`run_replication`; replication ``r`` uses a sub-seed of ``(seed, r)``.

    With ``workers > 1`` replications run in separate processes; results are
    collected in replication order, so they do not depend on ``workers``.
    """
    t0 = time.perf_counter()
    rows, balance, corr, sds, gaps = [], [], [], [], []
    jobs = [(spec, rep, seed, estimator) for rep in range(reps)]
    if workers > 1:
        pool = ProcessPoolExecutor(max_workers=workers)
        results = pool.map(_replication_task, jobs)
    else:
        pool = None
        results = map(_replication_task, jobs)
    try:
        for rep, out in enumerate(results):
            rows.extend(out["rows"])
            balance.append((out["before"], out["after"]))
            corr.append(out["corr_w_wp"])
            sds.append(out["outcome_sd"])
            gaps.append(out["identity_gap"])
            if progress is not None:
                progress(rep, time.perf_counter() - t0)
    finally:
        if pool is not None:
            pool.shutdown()
    return MonteCarloResult(rows, balance, corr, sds, time.perf_counter() - t0, spec,
                            {"reps": reps, "seed": seed, **estimator}, gaps)


def summarize(result):
    """Acceptance metrics of a Monte Carlo run as a plain dictionary."""
    return {"reps": len(result.balance), "bias_sd_units": result.bias(),
            "coverage": {c: result.coverage(c) for c in result.contrasts()},
            "coverage_pooled": result.coverage(),
            "balance_improved_share": result.balance_improved_share(),
            "mean_corr_w_wp": result.mean_corr_w_wp(),
            "max_identity_gap": max(result.identity_gaps, default=float("nan")),
            "runtime_seconds": result.runtime}


def main(argv=None):
    """``mvdml-mc``: Monte Carlo on the reference design, writing ``mc_results.csv``."""
    import argparse
    import json
    import os
    from pathlib import Path

    p = argparse.ArgumentParser(prog="mvdml-mc", description=main.__doc__)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--seed", type=int, default=20240101)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-active", type=int, default=100)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    args = p.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_monte_carlo(REFERENCE_DGP, args.reps, args.seed, workers=args.workers,
                          max_active=args.max_active,
                          progress=lambda r, t: print(f"rep {r + 1}/{args.reps} {t:.0f}s",
                                                      flush=True))
    res.write_csv(out / "mc_results.csv")
    summary = summarize(res)
    with open(out / "mc_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(json.dumps(summary, indent=2))
    return 0
