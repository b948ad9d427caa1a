"""Deterministic report files.

Numbers are written with six significant digits and ``\\n`` line endings so
that identical results give byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .diagnostics import COMPONENTS, balance_report, weight_anatomy, weight_correlations
from .exceptions import DMLError


def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        return "%.6g" % (0.0 if x == 0.0 else x)
    return str(x)


def _json_ready(obj):
    if isinstance(obj, dict):
        return {str(k): _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return None if not math.isfinite(x) else float("%.6g" % x)
    return obj


def write_csv(path, header, rows):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(header)
            for row in rows:
                out.writerow([fmt(v) for v in row])
    except OSError as exc:
        raise DMLError(f"cannot write {path}: {exc}") from None


def write_json(path, doc):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            json.dump(_json_ready(doc), fh, indent=2, sort_keys=False)
            fh.write("\n")
    except OSError as exc:
        raise DMLError(f"cannot write {path}: {exc}") from None


def effects_rows(effects):
    for r in effects.rows:
        yield [r.outcome, r.contrast, r.estimate, r.se_iid, r.se_clustered, r.p_value, r.n_used]


def cv_curve_rows(cv):
    K = cv.K
    for m, lam in enumerate(cv.lambdas):
        yield [lam, cv.mean_mse[m], cv.se_mse[m], cv.active_counts[m]] + [
            cv.per_fold_mse[k, m] for k in range(K)]


def _safe(name):
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in str(name))


def emit_reports(out, dataset, est, *, sd_convention="sum", run_info=None):
    """Write every artifact of one fitted :class:`~mvdml.dml.MultivaluedDML` run into ``out``.

    Returns the run-summary dictionary that was written.
    """
    out = Path(out)
    try:
        (out / "cv_curves").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DMLError(f"cannot create output directory {out}: {exc}") from None
    labels = dataset.treatment_labels
    nu = est.nuisances_

    write_csv(out / "effects.csv", ["outcome", "contrast", "estimate", "se_iid", "se_clustered",
                                    "p_value", "n_used"], effects_rows(est.effects_))

    balance_rows, balance_summary = [], {}
    for j, name in enumerate(dataset.outcome_names):
        rep = balance_report(dataset.covariates, dataset.treatment, est.weights_[j],
                             dataset.covariate_names, sd_convention)
        balance_summary[name] = rep.summary()
        balance_rows += [[name, c, b, a, f] for c, b, a, f in
                         zip(rep.names, rep.sd_before, rep.sd_after, rep.flags)]
    write_csv(out / "balance.csv", ["outcome", "column", "sd_before", "sd_after_max", "flag"],
              balance_rows)

    weight_rows, anatomy = [], {}
    for j, name in enumerate(dataset.outcome_names):
        anatomy[name] = {}
        for ws in est.weights_[j]:
            anatomy[name][labels[ws.t]] = weight_anatomy(ws)
            for pos, i in enumerate(ws.units):
                weight_rows.append([name, dataset.unit_id[i], labels[ws.t], ws.w[pos],
                                    ws.w_p[pos], ws.w_y[pos], ws.w_py[pos]])
    write_csv(out / "weights.csv", ["outcome", "unit_id", "treatment", "w", "w_p", "w_y", "w_py"],
              weight_rows)
    write_json(out / "weight_anatomy.json", {"percent_base": "sum of positive weights",
                                             "weights": anatomy})

    corr_rows = []
    T1 = len(est.weights_[0])
    for t in range(T1):
        C = weight_correlations([est.weights_[j][t] for j in range(len(est.weights_))])
        corr_rows += [[labels[t], c] + list(C[a]) for a, c in enumerate(COMPONENTS)]
    C = weight_correlations([ws for per in est.weights_ for ws in per])
    corr_rows += [["all", c] + list(C[a]) for a, c in enumerate(COMPONENTS)]
    write_csv(out / "weight_correlations.csv", ["treatment", "component"] + list(COMPONENTS),
              corr_rows)

    models = [(f"propensity_{_safe(labels[t])}", m) for t, m in enumerate(nu.propensity_models)]
    for j, name in enumerate(dataset.outcome_names):
        models += [(f"outcome_{_safe(name)}_{_safe(labels[t])}", m)
                   for t, m in enumerate(nu.outcome_models[j])]
    for key, m in models:
        K = m.cv_result_.K
        write_csv(out / "cv_curves" / f"{key}.csv",
                  ["lambda", "mean_mse", "se_mse", "active_count"]
                  + [f"fold_{k + 1}" for k in range(K)], cv_curve_rows(m.cv_result_))

    est.design_.write_ledger(out / "design_columns.csv")

    trim = est.trim_
    summary = dict(run_info or {})
    summary.update({
        "n": dataset.n,
        "n_used": int(trim.kept.sum()),
        "treatment_labels": list(labels),
        "design": {"columns": est.design_.shape[1], "dropped": len(est.design_.dropped),
                   "unpenalized": int(np.sum(~est.design_.penalized))},
        "trim": {"rule": str(trim.rule), "dropped": trim.dropped_count,
                 "dropped_by_treatment": {labels[t]: c for t, c in
                                          trim.dropped_by_group(dataset.treatment).items()},
                 "lower": list(trim.lower), "upper": list(trim.upper)},
        "models": {key: {"lambda": m.lambda_, "lambda_index": m.lambda_index_,
                         "grid_points": len(m.grid_), "grid_stop": m.grid_.stop_reason,
                         "selected": m.n_selected_, "refit_columns": int(m.refit_.n_features),
                         "refit_warning": m.refit_.warning}
                   for key, m in models},
        "identity_max_gap": max(ws.identity_gap for per in est.weights_ for ws in per),
        "balance": balance_summary,
        "sd_convention": sd_convention,
    })
    write_json(out / "run_summary.json", summary)
    return summary
