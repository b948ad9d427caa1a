"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -s`` to see the lines as they happen;
they are also collected in the terminal summary.
"""

import filecmp
import os
import time

import numpy as np
import pytest

from conftest import make_dataset, record
from mvdml.cv import CvResult, FoldAssignment, cross_validate_post_lasso, select_lambda
from mvdml.diagnostics import standardized_differences
from mvdml.dml import (MultivaluedDML, clustered_variance, iid_variance, potential_outcome,
                       trim_common_support)
from mvdml.lasso import (PenaltyGrid, kkt_residual, lasso_objective, lasso_path,
                         post_lasso_refit)
from mvdml.synth import (REFERENCE_DGP, direct_least_squares, loo_cv_oracle,
                         proximal_lasso_oracle, run_monte_carlo, summarize)


def test_criterion_1_weighted_representation_identity():
    worst = 0.0
    runs = 0
    for seed, T in ((0, 3), (1, 1), (2, 2)):
        ds = make_dataset(n=300, T=T, seed=seed, outcomes=2)
        for trim in ("minmax", "none", "percentile:2"):
            est = MultivaluedDML(max_active=40, n_lambda=30, trim=trim, random_state=seed).fit(ds)
            for j, per in enumerate(est.weights_):
                for ws in per:
                    ys = ds.outcomes[ws.units, j]
                    gap = abs(ys @ ws.w - est.scores_[j][:, ws.t].mean())
                    worst = max(worst, gap, ws.identity_gap)
            runs += 1
    ok = worst < 1e-10
    record(1, "weighted-representation identity", ok,
           f"max |Y_t.w - mu_t| = {worst:.2e} over {runs} runs (tol 1e-10)")
    assert ok


def test_criterion_2_doubly_robust_reductions():
    y = np.array([2.0, 4.0, 7.0, -1.0])
    d = np.array([1.0, 1.0, 0.0, 0.0])
    mu_const, _ = potential_outcome(y, d, np.full(4, 3.0), np.full(4, 0.5))
    ht, _ = potential_outcome(y, d, np.zeros(4), np.full(4, 0.5))
    errs = [abs(mu_const - 3.0), abs(ht - 3.0)]
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(5, 60))
        d = np.zeros(n)
        d[rng.choice(n, int(rng.integers(1, n)), replace=False)] = 1.0
        y = rng.normal(size=n)
        share = d.mean()
        group_mean = y[d == 1].mean()
        est, _ = potential_outcome(y, d, np.full(n, group_mean), np.full(n, share))
        errs.append(abs(est - group_mean))
    worst = max(errs)
    ok = worst < 1e-12
    record(2, "doubly-robust reductions", ok,
           f"constant nuisances -> {mu_const:.15g}, IPW branch -> {ht:.15g}, "
           f"max error {worst:.2e} (tol 1e-12)")
    assert ok


def test_criterion_3_solver_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    gap_worst, kkt_worst, refit_worst, points = 0.0, 0.0, 0.0, 0
    for _ in range(100):
        n = int(rng.integers(20, 201))
        p = int(rng.integers(2, 101))
        X = rng.normal(size=(n, p)) * rng.uniform(0.5, 3.0, size=p)
        beta = np.zeros(p)
        k = min(p, 5)
        beta[rng.choice(p, k, replace=False)] = rng.normal(size=k)
        y = X @ beta + rng.normal(size=n)
        grid, fits = lasso_path(X, y)
        for f in fits:
            kkt_worst = max(kkt_worst, kkt_residual(X, y, f))
        for m in sorted({len(fits) // 2, int(rng.integers(0, len(fits)))}):
            f = fits[m]
            b0, coef = proximal_lasso_oracle(X, y, f.lam)
            gap = (lasso_objective(X, y, f.intercept, f.coefficients, f.lam)
                   - lasso_objective(X, y, b0, coef, f.lam))
            gap_worst = max(gap_worst, abs(gap))
            points += 1
        sel = fits[len(fits) // 2].active_set
        if sel.size < n - 1:
            refit = post_lasso_refit(X, y, "gaussian", sel)
            A = np.column_stack([np.ones(n), X[:, refit.columns]])
            direct = direct_least_squares(A, y)
            refit_worst = max(refit_worst, abs(direct[0] - refit.intercept),
                              float(np.max(np.abs(direct[1:] - refit.coefficients), initial=0.0)))
    elapsed = time.perf_counter() - t0
    ok = gap_worst < 1e-8 and kkt_worst < 1e-6 and refit_worst < 1e-8 and elapsed < 120
    record(3, "solver correctness", ok,
           f"objective gap {gap_worst:.2e} at {points} points (tol 1e-8), max KKT "
           f"{kkt_worst:.2e} (tol 1e-6), refit vs normal equations {refit_worst:.2e} (tol 1e-8), "
           f"{elapsed:.0f}s (limit 120s)")
    assert ok


def _random_cv(rng, K=10, M=40):
    base = np.sort(rng.uniform(0.5, 2.0, M))[::-1] if rng.random() < 0.5 else rng.uniform(
        0.5, 2.0, M)
    curve = base + 0.3 * np.cos(np.linspace(0, rng.uniform(1, 9), M))
    per_fold = curve + rng.normal(scale=rng.uniform(0.01, 0.5), size=(K, M))
    valid = rng.random(M) > 0.1
    valid[int(rng.integers(0, M))] = True
    per_fold[:, ~valid] = np.nan
    mean = np.where(valid, np.nan_to_num(per_fold).mean(axis=0), np.nan)
    se = np.where(valid, np.nan_to_num(per_fold).std(axis=0, ddof=1) / np.sqrt(K), np.nan)
    grid = PenaltyGrid(np.logspace(0, -3, M))
    return CvResult(grid, per_fold, mean, se, np.arange(M), np.zeros((K, M), int), valid)


def test_criterion_4_cv_machinery():
    worst, cells = 0.0, 0
    for n in (8, 12, 20):
        rng = np.random.default_rng(n)
        X = rng.normal(size=(n, 4))
        y = X[:, 0] - X[:, 1] + 0.5 * rng.normal(size=n)
        grid, _ = lasso_path(X, y, n_points=15)
        folds = FoldAssignment(np.arange(n) + 1, n, 0)
        cv = cross_validate_post_lasso(X, y, "gaussian", grid, folds)
        oracle = loo_cv_oracle(X, y, grid.lambdas)
        worst = max(worst, float(np.max(np.abs(cv.per_fold_mse - oracle)
                                        / np.maximum(1.0, np.abs(oracle)))))
        cells += oracle.size
    rng = np.random.default_rng(99)
    ordered = 0
    for _ in range(50):
        cv = _random_cv(rng)
        lam = [cv.lambdas[select_lambda(cv, r)] for r in ("1se", "min", "1se_plus", "2se_plus")]
        ordered += lam[0] >= lam[1] >= lam[2] >= lam[3]
    ok = worst < 1e-10 and ordered == 50
    record(4, "cross-validation machinery", ok,
           f"LOO vs exhaustive oracle max rel. diff {worst:.1e} over {cells} fold-points; "
           f"rule ordering held on {ordered}/50 curves")
    assert ok


def test_criterion_5_variance_formulas():
    rng = np.random.default_rng(5)
    psi = rng.normal(size=37)
    mu = psi.mean()
    single = clustered_variance(psi, mu, np.arange(37))
    iid = iid_variance(psi, mu)
    one = clustered_variance(psi, mu, np.zeros(37))
    hand = iid_variance(np.array([0.0, 2.0]), 1.0)
    ok = single == iid and abs(one) < 1e-28 and hand == 1.0
    record(5, "variance formulas", ok,
           f"singleton-cluster {single!r} vs iid {iid!r}; one cluster {one:.1e}; "
           f"psi=(0,2) -> {hand!r}")
    assert ok


def test_criterion_6_standardized_difference_fidelity():
    # 100 units per group; 38 and 60 ones give means 0.38 and 0.60 exactly
    x = np.r_[np.ones(38), np.zeros(62), np.ones(60), np.zeros(40)]
    g = np.r_[np.zeros(100, int), np.ones(100, int)]
    sd, _ = standardized_differences(x, g, convention="sum")
    value = abs(sd[0, 0])
    ok = abs(value - 32.3) <= 1.0
    record(6, "standardized-difference formula", ok,
           f"|SD| = {value:.2f} vs reference 32.3 (tolerance +/-1.0 for rounded means)")
    assert ok


@pytest.mark.slow
def test_criterion_7_monte_carlo_reference_design():
    workers = os.cpu_count() or 1
    res = run_monte_carlo(REFERENCE_DGP, reps=200, seed=20240101, workers=workers,
                          max_active=100)
    s = summarize(res)
    bias_ok = all(b < 0.03 for b in s["bias_sd_units"].values())
    cov_ok = 0.92 <= s["coverage_pooled"] <= 0.98
    bal_ok = s["balance_improved_share"] >= 0.95
    corr_ok = s["mean_corr_w_wp"] > 0.9
    ok = bias_ok and cov_ok and bal_ok and corr_ok
    bias = ", ".join(f"{c}:{b:.3f}" for c, b in s["bias_sd_units"].items())
    cov = ", ".join(f"{c}:{v:.3f}" for c, v in s["coverage"].items())
    record(7, "Monte Carlo on the reference design", ok,
           f"bias/SD [{bias}] (tol 0.03); coverage pooled {s['coverage_pooled']:.3f} "
           f"[{cov}] (range 0.92-0.98); balance improved in "
           f"{100 * s['balance_improved_share']:.1f}% of reps (need 95%); mean corr(w,w_p) "
           f"{s['mean_corr_w_wp']:.3f} (need >0.9); max identity gap "
           f"{s['max_identity_gap']:.1e}; runtime {s['runtime_seconds'] / 60:.1f} min on "
           f"{workers} worker(s)")
    assert ok


def test_criterion_8_trimming():
    # p_1 of group A spans [0.3, 0.9], of group B [0.1, 0.7]
    p1 = np.array([0.3, 0.5, 0.9, 0.6, 0.1, 0.2, 0.7, 0.4])
    d = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    mm = trim_common_support(p1[:, None], d, "minmax")
    pct = trim_common_support(p1[:, None], d, "percentile:1")
    none = trim_common_support(p1[:, None], d, "none")
    expected = np.array([1, 1, 0, 1, 0, 0, 1, 1], dtype=bool)
    ok = (mm.lower[0] == 0.3 and mm.upper[0] == 0.7 and np.array_equal(mm.kept, expected)
          and pct.dropped_count >= mm.dropped_count and none.dropped_count == 0)
    record(8, "common-support trimming", ok,
           f"minmax bounds [{mm.lower[0]:.2f}, {mm.upper[0]:.2f}], dropped {mm.dropped_count} "
           f"(p=0.2 kept={bool(mm.kept[5])}); percentile:1 dropped {pct.dropped_count}; "
           f"none dropped {none.dropped_count}")
    assert ok


def test_criterion_9_cli_determinism(tmp_path):
    from mvdml.cli import main
    from mvdml.dataset_io import write_dataset
    import json

    ds = make_dataset(n=360, T=3, seed=9, outcomes=2)
    cfg = write_dataset(ds, tmp_path / "data.csv").to_dict()
    cfg.update({"also_binary": True, "max_active": 40, "n_lambda": 30})
    (tmp_path / "config.json").write_text(json.dumps(cfg))
    outs = []
    for label, workers in (("a", 1), ("b", 4), ("c", 2)):
        out = tmp_path / label
        code = main(["--data", str(tmp_path / "data.csv"), "--config",
                     str(tmp_path / "config.json"), "--out", str(out), "--seed", "17",
                     "--workers", str(workers)])
        assert code == 0
        outs.append(out)
    files = sorted(str(p.relative_to(outs[0])) for p in outs[0].rglob("*") if p.is_file())
    mismatched = []
    for other in outs[1:]:
        match, mismatch, errors = filecmp.cmpfiles(outs[0], other, files, shallow=False)
        mismatched += mismatch + errors
    ok = not mismatched and len(files) > 0
    record(9, "end-to-end determinism", ok,
           f"{len(files)} artifacts compared across worker counts 1/4/2; "
           f"mismatches: {mismatched or 'none'}")
    assert ok
