"""Experiment protocols over ingested tables: correlation heatmaps,
single/multi-objective forest fits, importance rankings, and the
top-1-only / exclude-top-1 ablations.

Every fit uses an 80/20 split and is repeated over the configured seeds;
reported numbers are mean and std over seeds. The seed drives both the
split shuffle and the forest bootstrap.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import forest as rf
from .ingest import IngestError, robust_column
from .metrics import ConstantInputError, kendall_tau, r2_score
from .proxies import CANONICAL_PROXIES


@dataclass
class ExperimentConfig:
    dataset_id: str
    attack: str = "pgd"
    eps: str = "1/255"
    split: float = 0.8
    seeds: tuple = (0, 1, 2, 3, 4)
    n_trees: int = 100
    permutation_repeats: int = 10

    def __post_init__(self):
        if not 0.0 < self.split < 1.0:
            raise ValueError("split fraction must lie in (0, 1)")
        self.seeds = tuple(int(s) for s in self.seeds)


def feature_matrix(table):
    """Features in canonical proxy order; columns with any MISSING dropped.

    Returns (X, feature_names). The drop policy mirrors the treatment of
    hessian_eig, which exists only for CIFAR-10 tables.
    """
    names = []
    cols = []
    for name in CANONICAL_PROXIES:
        if name not in table.columns:
            continue
        col = table.columns[name]
        if np.isnan(col).any():
            continue
        names.append(name)
        cols.append(col)
    if not names:
        raise IngestError("no complete proxy columns available")
    return np.column_stack(cols), names


def target_matrix(table, scenario, config):
    """Target columns for a scenario: 'clean', 'robust', or 'multi'.

    'robust' and 'multi' use the (attack, eps) named in the config; 'multi'
    stacks clean and robust accuracy into a two-column target.
    """
    clean = table.columns["clean"]
    if np.isnan(clean).any():
        raise IngestError("clean accuracy has missing values")
    if scenario == "clean":
        return clean[:, None], ["clean"]
    col = robust_column(config.attack, config.eps)
    if col not in table.columns:
        available = [c for c in table.accuracy_columns if c != "clean"]
        raise IngestError(f"robust column {col!r} not in table; available: "
                          f"{available}")
    robust = table.columns[col]
    if np.isnan(robust).any():
        raise IngestError(f"robust column {col!r} has missing values")
    if scenario == "robust":
        return robust[:, None], [col]
    if scenario == "multi":
        return np.column_stack([clean, robust]), ["clean", col]
    raise ValueError(f"unknown scenario {scenario!r}")


def split_indices(n, split, seed):
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(split * n))
    return perm[:cut], perm[cut:]


@dataclass
class FitResult:
    scenario: str
    target_names: list
    feature_names: list
    r2_mean: float
    r2_std: float
    per_seed: list
    seeds: tuple


def fit_scenario(X, Y, config, feature_names, scenario, target_names):
    """Fit a forest per seed on the 80% split; score R2 on the held-out 20%."""
    scores = []
    for seed in config.seeds:
        train, test = split_indices(X.shape[0], config.split, seed)
        model = rf.fit_forest(X[train], Y[train], seed=seed,
                              n_trees=config.n_trees,
                              feature_names=feature_names)
        scores.append(r2_score(Y[test], model.predict(X[test])))
    scores = np.asarray(scores)
    return FitResult(scenario, target_names, list(feature_names),
                     float(scores.mean()), float(scores.std()),
                     [float(s) for s in scores], config.seeds)


def run_fit(table, config, scenario="multi", features=None):
    """R2 report for one scenario on one dataset's table."""
    sub = table.for_dataset(config.dataset_id)
    X, names = feature_matrix(sub)
    if features is not None:
        keep = [names.index(f) for f in features]
        X, names = X[:, keep], [names[i] for i in keep]
    Y, target_names = target_matrix(sub, scenario, config)
    return fit_scenario(X, Y, config, names, scenario, target_names)


@dataclass
class CorrelationReport:
    proxy_names: list
    accuracy_names: list
    matrix: np.ndarray          # |tau|, NaN where undefined
    flags: list = field(default_factory=list)


def run_correlate(table, config):
    """Absolute Kendall tau between every proxy and every accuracy column."""
    sub = table.for_dataset(config.dataset_id)
    proxies = sub.proxy_columns
    accs = sub.accuracy_columns
    matrix = np.full((len(proxies), len(accs)), np.nan)
    flags = []
    for i, p in enumerate(proxies):
        pcol = sub.columns[p]
        for j, a in enumerate(accs):
            acol = sub.columns[a]
            mask = np.isfinite(pcol) & np.isfinite(acol)
            if mask.sum() < 2:
                flags.append((p, a, "insufficient data"))
                continue
            try:
                matrix[i, j] = abs(kendall_tau(pcol[mask], acol[mask]))
            except ConstantInputError:
                flags.append((p, a, "constant column"))
    return CorrelationReport(proxies, accs, matrix, flags)


@dataclass
class ImportanceReport:
    feature_names: list
    gini_mean: np.ndarray
    gini_std: np.ndarray
    perm_mean: np.ndarray
    perm_std: np.ndarray
    ranking: list               # feature names, most important first
    scenario: str
    target_names: list


def run_importance(table, config, scenario="multi"):
    """Gini and permutation importances of the scenario forest.

    Importances are averaged over the seed protocol; the ranking (and the
    bar alignment in the SVG output) follows the Gini means.
    """
    sub = table.for_dataset(config.dataset_id)
    X, names = feature_matrix(sub)
    Y, target_names = target_matrix(sub, scenario, config)
    ginis = []
    perms = []
    for seed in config.seeds:
        train, test = split_indices(X.shape[0], config.split, seed)
        model = rf.fit_forest(X[train], Y[train], seed=seed,
                              n_trees=config.n_trees, feature_names=names)
        ginis.append(model.gini_importance())
        _, pmean, _ = rf.permutation_importance(
            model, X[test], Y[test], repeats=config.permutation_repeats,
            seed=seed)
        perms.append(pmean)
    ginis = np.asarray(ginis)
    perms = np.asarray(perms)
    gini_mean = ginis.mean(axis=0)
    order = np.argsort(-gini_mean, kind="stable")
    ranking = [names[i] for i in order]
    return ImportanceReport(names, gini_mean, ginis.std(axis=0),
                            perms.mean(axis=0), perms.std(axis=0),
                            ranking, scenario, target_names)


def run_top1_only(table, config, scenario="multi", importance=None):
    """Refit using only the most important feature of the scenario forest."""
    importance = importance or run_importance(table, config, scenario)
    top = importance.ranking[0]
    result = run_fit(table, config, scenario, features=[top])
    return result, top


def run_exclude_top1(table, config, scenario="multi", importance=None):
    """Drop the most important feature, refit, and re-rank the rest."""
    importance = importance or run_importance(table, config, scenario)
    top = importance.ranking[0]
    rest = [f for f in importance.feature_names if f != top]
    result = run_fit(table, config, scenario, features=rest)

    sub = table.for_dataset(config.dataset_id)
    X, names = feature_matrix(sub)
    keep = [names.index(f) for f in rest]
    X = X[:, keep]
    Y, target_names = target_matrix(sub, scenario, config)
    ginis = []
    for seed in config.seeds:
        train, _ = split_indices(X.shape[0], config.split, seed)
        model = rf.fit_forest(X[train], Y[train], seed=seed,
                              n_trees=config.n_trees, feature_names=rest)
        ginis.append(model.gini_importance())
    gini_mean = np.asarray(ginis).mean(axis=0)
    order = np.argsort(-gini_mean, kind="stable")
    new_ranking = [rest[i] for i in order]
    return result, top, new_ranking
