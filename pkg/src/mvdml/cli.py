"""Command-line front end: ``mvdml --data d.csv --config c.json --out results/``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .cv import normalize_rule
from .dataset_io import SchemaConfig, load_dataset
from .dml import MultivaluedDML, dataset_design, parse_trim
from .exceptions import ConfigError, DMLError
from .reports import emit_reports

logger = logging.getLogger("mvdml")

RULE_CHOICES = ("min", "1se", "1se+", "2se+", "1se_plus", "2se_plus")


@dataclass
class RunConfig:
    schema: SchemaConfig
    rule: str = "min"
    folds: int = 10
    trim: str = "minmax"
    seed: int = 0
    sd_convention: str = "sum"
    also_binary: bool = False
    normalize_propensity: bool = False
    max_active: int = 500
    n_lambda: int = 100
    expansion: dict = field(default_factory=lambda: {"poly_degree": 4, "min_cell_frac": 0.01,
                                                     "corr_threshold": 0.99})
    workers: int = 1

    def __post_init__(self):
        try:
            self.rule = normalize_rule(self.rule)
        except ValueError as exc:
            raise ConfigError(f"rule: {exc}") from None
        self.trim = str(parse_trim(self.trim))
        if not isinstance(self.folds, int) or self.folds < 2:
            raise ConfigError(f"folds: need an integer >= 2, got {self.folds!r}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        if self.sd_convention not in ("sum", "mean"):
            raise ConfigError(f"sd_convention: expected sum or mean, got {self.sd_convention!r}")
        if int(self.max_active) < 1 or int(self.n_lambda) < 2:
            raise ConfigError("max_active must be >= 1 and n_lambda >= 2")
        known = {"poly_degree", "min_cell_frac", "corr_threshold"}
        stray = sorted(set(self.expansion) - known)
        if stray:
            raise ConfigError(f"expansion: unknown field(s) {stray}")
        self.expansion = {"poly_degree": 4, "min_cell_frac": 0.01, "corr_threshold": 0.99,
                          **self.expansion}

    def resolved(self):
        """Every setting that influences the artifacts; the worker count does not."""
        doc = asdict(self)
        doc.pop("workers")
        doc["schema"] = self.schema.to_dict()
        return doc


def build_parser():
    p = argparse.ArgumentParser(
        prog="mvdml",
        description="Double machine learning estimates of potential-outcome means and "
                    "pairwise effects for a multivalued treatment, with Post-Lasso nuisances.")
    p.add_argument("--data", required=True, help="input CSV (UTF-8, comma, header row)")
    p.add_argument("--config", required=True, help="JSON schema and run configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rule", default="min", choices=RULE_CHOICES,
                   help="penalty selection rule (default: min)")
    p.add_argument("--folds", type=int, default=10, help="cross-validation folds (default: 10)")
    p.add_argument("--trim", default="minmax",
                   help="common-support rule: minmax, percentile:P or none (default: minmax)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--sd-convention", default="sum", choices=("sum", "mean"),
                   help="denominator of the standardized differences (default: sum)")
    p.add_argument("--also-binary", action="store_true",
                   help="also estimate the any-versus-none collapse into OUT/binary")
    p.add_argument("--workers", type=int, default=None,
                   help="worker threads for model fits (default: number of CPUs)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


class _KeyValueFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage().replace('"', "'")
        return f'level={record.levelname.lower()} logger={record.name} msg="{msg}"'


def _setup_logging(verbose):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KeyValueFormatter())
    root = logging.getLogger("mvdml")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def load_run_config(args):
    try:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    schema = SchemaConfig.from_dict(doc)
    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    if workers < 1:
        raise ConfigError("workers: must be >= 1")
    return RunConfig(schema, rule=args.rule, folds=args.folds, trim=args.trim, seed=args.seed,
                     sd_convention=args.sd_convention,
                     also_binary=bool(args.also_binary or doc.get("also_binary", False)),
                     normalize_propensity=bool(doc.get("normalize_propensity", False)),
                     max_active=int(doc.get("max_active", 500)),
                     n_lambda=int(doc.get("n_lambda", 100)),
                     expansion=dict(doc.get("expansion", {})), workers=workers)


def _estimate(dataset, design, cfg):
    return MultivaluedDML(rule=cfg.rule, n_folds=cfg.folds, trim=cfg.trim,
                          normalize_propensity=cfg.normalize_propensity,
                          max_active=cfg.max_active, n_lambda=cfg.n_lambda,
                          random_state=cfg.seed, n_jobs=cfg.workers).fit(dataset, design)


def run_analysis(cfg: RunConfig, data_path, out):
    """Full pipeline for one configuration; writes all artifacts under ``out``."""
    dataset = load_dataset(data_path, cfg.schema)
    logger.info("loaded n=%d treatments=%d outcomes=%d covariates=%d", dataset.n,
                dataset.T + 1, len(dataset.outcome_names), len(dataset.covariate_names))
    design = dataset_design(dataset, **cfg.expansion)
    logger.info("design columns=%d dropped=%d", design.shape[1], len(design.dropped))
    runs = [(Path(out), dataset, "multivalued")]
    if cfg.also_binary:
        if dataset.T == 1:
            logger.warning("treatment is already binary; skipping the binary collapse")
        else:
            runs.append((Path(out) / "binary", dataset.binary(), "binary"))
    summaries = []
    for path, ds, kind in runs:
        est = _estimate(ds, design, cfg)
        info = {"version": __version__, "kind": kind, "config": cfg.resolved(),
                "rule": cfg.rule, "seed": cfg.seed, "K": cfg.folds, "trim_rule": cfg.trim}
        summaries.append(emit_reports(path, ds, est, sd_convention=cfg.sd_convention,
                                      run_info=info))
        logger.info("%s run written to %s (identity gap %.2e)", kind, path,
                    summaries[-1]["identity_max_gap"])
    return summaries


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = load_run_config(args)
        run_analysis(cfg, args.data, args.out)
    except DMLError as exc:
        kind = type(exc).__name__
        logger.error("%s: %s", kind, exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
