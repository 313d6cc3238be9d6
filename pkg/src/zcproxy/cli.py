"""zcproxy command line: ingest tables, run experiments, drive the pipeline.

Exit codes: 0 success, 2 validation error (bad input data or config),
3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import experiments as xp
from . import ingest as ing
from . import pipeline as pl
from . import reports
from .autodiff import ContractError, NonFiniteError, ShapeError
from .metrics import ConstantInputError
from .space import ConfigError, RangeError

VALIDATION_ERRORS = (ing.IngestError, ConfigError, RangeError, ShapeError,
                     ContractError, ConstantInputError, ValueError, KeyError,
                     FileNotFoundError, json.JSONDecodeError)


def _load_json(path):
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _experiment_config(args):
    overrides = _load_json(getattr(args, "config", None))
    cfg = {"dataset_id": args.dataset,
           "attack": getattr(args, "attack", "pgd") or "pgd",
           "eps": getattr(args, "eps", "1/255") or "1/255"}
    if getattr(args, "seed", None) is not None:
        cfg["seeds"] = tuple(range(args.seed, args.seed + 5))
    for key in ("split", "seeds", "n_trees", "permutation_repeats"):
        if key in overrides:
            cfg[key] = overrides[key]
    return xp.ExperimentConfig(**cfg)


def _config_dict(config):
    return {"dataset_id": config.dataset_id, "attack": config.attack,
            "eps": config.eps, "split": config.split,
            "seeds": list(config.seeds), "n_trees": config.n_trees}


def _outdir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def cmd_ingest(args):
    table = ing.ingest(args.path, format=args.format, percent=args.percent,
                       flops_units=args.flops_units)
    print(table.summary())
    for lineno, reason in table.rejected:
        print(f"  rejected line {lineno}: {reason}")
    for w in table.warnings:
        print(f"  warning: {w}")
    if args.out:
        ing.export(table, args.out)
        print(f"normalized table written to {args.out}")
    return 0


def cmd_correlate(args):
    table = ing.ingest(args.data)
    config = _experiment_config(args)
    report = xp.run_correlate(table, config)
    out = _outdir(args)
    cfg = _config_dict(config)
    reports.write_correlation_csv(os.path.join(out, "correlation.csv"),
                                  report, cfg)
    reports.svg_heatmap(os.path.join(out, "correlation.svg"), report.matrix,
                        report.proxy_names, report.accuracy_names,
                        title=f"|kendall tau| on {config.dataset_id}")
    print(f"correlation matrix: {len(report.proxy_names)} proxies x "
          f"{len(report.accuracy_names)} accuracy columns -> {out}")
    for p, a, why in report.flags:
        print(f"  NA cell ({p}, {a}): {why}")
    return 0


def cmd_fit(args):
    table = ing.ingest(args.data)
    config = _experiment_config(args)
    scenarios = {"single": ["clean", "robust"], "multi": ["multi"],
                 "all": ["clean", "robust", "multi"]}[args.mode]
    results = []
    for scenario in scenarios:
        res = xp.run_fit(table, config, scenario)
        results.append((scenario, res))
        print(f"{scenario:6s} targets={'+'.join(res.target_names)}  "
              f"R2 = {res.r2_mean:.4f} +- {res.r2_std:.4f}")
    out = _outdir(args)
    reports.write_fit_csv(os.path.join(out, "fit.csv"), results,
                          _config_dict(config), config.seeds)
    return 0


def cmd_importance(args):
    table = ing.ingest(args.data)
    config = _experiment_config(args)
    report = xp.run_importance(table, config, scenario=args.scenario)
    out = _outdir(args)
    cfg = _config_dict(config)
    reports.write_importance_csv(os.path.join(out, "importance.csv"),
                                 report, cfg, config.seeds)
    order = [report.feature_names.index(f) for f in report.ranking]
    reports.svg_bars(os.path.join(out, "importance_gini.svg"),
                     report.feature_names, report.gini_mean,
                     stds=report.gini_std, order=order,
                     title=f"gini importance ({config.dataset_id}, "
                           f"{config.attack}@{config.eps})")
    reports.svg_bars(os.path.join(out, "importance_permutation.svg"),
                     report.feature_names, report.perm_mean,
                     stds=report.perm_std, order=order,
                     title="permutation importance")
    print("importance ranking: " + ", ".join(report.ranking))
    return 0


def cmd_top1(args):
    table = ing.ingest(args.data)
    config = _experiment_config(args)
    result, top = xp.run_top1_only(table, config, scenario=args.scenario)
    print(f"top feature: {top}")
    print(f"R2 with only {top}: {result.r2_mean:.4f} +- {result.r2_std:.4f}")
    out = _outdir(args)
    reports.write_fit_csv(os.path.join(out, "top1.csv"),
                          [(f"top1-only:{top}", result)],
                          _config_dict(config), config.seeds)
    return 0


def cmd_ablate(args):
    table = ing.ingest(args.data)
    config = _experiment_config(args)
    result, top, ranking = xp.run_exclude_top1(table, config,
                                               scenario=args.scenario)
    print(f"dropped top feature: {top}")
    print(f"R2 without {top}: {result.r2_mean:.4f} +- {result.r2_std:.4f}")
    print("updated ranking: " + ", ".join(ranking))
    out = _outdir(args)
    reports.write_fit_csv(os.path.join(out, "ablate.csv"),
                          [(f"exclude-top1:{top}", result)],
                          _config_dict(config), config.seeds)
    with open(os.path.join(out, "ablate_ranking.csv"), "w") as fh:
        fh.write("rank,feature\n")
        for i, name in enumerate(ranking, start=1):
            fh.write(f"{i},{name}\n")
    return 0


def cmd_pipeline(args):
    overrides = _load_json(args.config)
    arch_indices = None
    if args.arch_list:
        arch_indices = pl.arch_list_from_spec(args.arch_list)
    elif "arch_spec" in overrides:
        arch_indices = pl.arch_list_from_spec(overrides.pop("arch_spec"),
                                              seed=overrides.get("seed", 0))
    if args.seed is not None:
        overrides["seed"] = args.seed
    manifest = pl.run_desk_pipeline(overrides, _outdir(args),
                                    arch_indices=arch_indices)
    print(f"pipeline complete: {manifest['n_architectures']} architectures, "
          f"{manifest['n_errors']} errors, outputs: "
          f"{', '.join(manifest['outputs'])}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="zcproxy",
        description="zero-cost proxies, robustness evaluation and "
                    "accuracy prediction on the NAS-Bench-201 cell space")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and normalize a proxy table")
    p.add_argument("--path", required=True)
    p.add_argument("--format", choices=("csv", "json"), default=None)
    p.add_argument("--percent", action="store_true",
                   help="accuracies are percent scaled")
    p.add_argument("--flops-units", choices=("mac", "2mac"), default="mac")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ingest)

    def common(p, scenario_default=None):
        p.add_argument("--data", required=True, help="ingested table path")
        p.add_argument("--dataset", required=True)
        p.add_argument("--attack", default="pgd")
        p.add_argument("--eps", default="1/255")
        p.add_argument("--seed", type=int, default=None,
                       help="first of 5 consecutive protocol seeds")
        p.add_argument("--out", default=None)
        p.add_argument("--config", default=None, help="JSON config overrides")
        if scenario_default:
            p.add_argument("--scenario", default=scenario_default,
                           choices=("clean", "robust", "multi"))

    p = sub.add_parser("correlate", help="Kendall tau |correlation| matrix")
    common(p)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("fit", help="random-forest R2 on an 80/20 split")
    common(p)
    p.add_argument("--mode", choices=("single", "multi", "all"),
                   default="all")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("importance", help="gini + permutation importances")
    common(p, scenario_default="multi")
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("top1", help="refit with only the top feature")
    common(p, scenario_default="multi")
    p.set_defaults(func=cmd_top1)

    p = sub.add_parser("ablate", help="refit without the top feature")
    common(p, scenario_default="multi")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("pipeline", help="desk-scale proxy + attack pipeline")
    p.add_argument("--config", default=None, help="pipeline JSON config")
    p.add_argument("--arch-list", default=None,
                   help="file with one architecture index per line")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # pragma: no cover - defensive
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
