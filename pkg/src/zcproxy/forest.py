"""Random-forest regression built from scratch on exact CART trees.

Trees grow until leaves are pure or hold fewer than 2 samples, consider
every feature at every split, and minimize the mean per-target variance.
Equal-gain ties resolve to the lowest feature index, then the lowest
threshold, so fitting is fully deterministic under the forest seed.
"""
from __future__ import annotations

import json

import numpy as np
from numba import njit

from .metrics import r2_score

DEFAULT_TREES = 100


@njit(cache=True)
def _grow_tree(X, Y, sample_idx, feature, threshold, left, right, value,
               importance):
    n_feat = X.shape[1]
    n_tgt = Y.shape[1]
    m0 = sample_idx.shape[0]

    # presort the node's samples once per feature; partitions below keep
    # each per-feature segment sorted, so split search stays linear
    orders = np.empty((n_feat, m0), dtype=np.int64)
    vals0 = np.empty(m0)
    for f in range(n_feat):
        for i in range(m0):
            vals0[i] = X[sample_idx[i], f]
        ord0 = np.argsort(vals0)
        for i in range(m0):
            orders[f, i] = sample_idx[ord0[i]]

    mark = np.zeros(X.shape[0], dtype=np.bool_)
    buf = np.empty(m0, dtype=np.int64)

    stack_start = np.empty(2 * m0 + 2, dtype=np.int64)
    stack_end = np.empty(2 * m0 + 2, dtype=np.int64)
    stack_node = np.empty(2 * m0 + 2, dtype=np.int64)
    stack_start[0], stack_end[0], stack_node[0] = 0, m0, 0
    top = 1
    next_node = 1

    s = np.empty(n_tgt)
    sq = np.empty(n_tgt)
    sl = np.empty(n_tgt)
    sql = np.empty(n_tgt)

    while top > 0:
        top -= 1
        start, end, node = stack_start[top], stack_end[top], stack_node[top]
        m = end - start
        for t in range(n_tgt):
            s[t] = 0.0
            sq[t] = 0.0
        for ii in range(start, end):
            r = orders[0, ii]
            for t in range(n_tgt):
                v = Y[r, t]
                s[t] += v
                sq[t] += v * v
        imp = 0.0
        for t in range(n_tgt):
            var = sq[t] / m - (s[t] / m) ** 2
            if var < 0.0:
                var = 0.0
            imp += var
        imp /= n_tgt
        for t in range(n_tgt):
            value[node, t] = s[t] / m
        feature[node] = -1
        if m < 2 or imp <= 0.0:
            continue

        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        for f in range(n_feat):
            for t in range(n_tgt):
                sl[t] = 0.0
                sql[t] = 0.0
            for j in range(m - 1):
                r = orders[f, start + j]
                for t in range(n_tgt):
                    v = Y[r, t]
                    sl[t] += v
                    sql[t] += v * v
                vj = X[r, f]
                vj1 = X[orders[f, start + j + 1], f]
                if vj1 <= vj:
                    continue
                nl = j + 1
                nr = m - nl
                impl = 0.0
                impr = 0.0
                for t in range(n_tgt):
                    varl = sql[t] / nl - (sl[t] / nl) ** 2
                    if varl < 0.0:
                        varl = 0.0
                    sr = s[t] - sl[t]
                    sqr = sq[t] - sql[t]
                    varr = sqr / nr - (sr / nr) ** 2
                    if varr < 0.0:
                        varr = 0.0
                    impl += varl
                    impr += varr
                impl /= n_tgt
                impr /= n_tgt
                gain = imp - (nl / m) * impl - (nr / m) * impr
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_thr = (vj + vj1) / 2.0
        if best_f < 0:
            continue

        nl = 0
        for ii in range(start, end):
            r = orders[best_f, ii]
            goes_left = X[r, best_f] <= best_thr
            mark[r] = goes_left
            if goes_left:
                nl += 1
        # stable partition of every feature's segment around the split
        for f in range(n_feat):
            a = 0
            b = nl
            for ii in range(start, end):
                r = orders[f, ii]
                if mark[r]:
                    buf[a] = r
                    a += 1
                else:
                    buf[b] = r
                    b += 1
            for ii in range(m):
                orders[f, start + ii] = buf[ii]

        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = next_node
        right[node] = next_node + 1
        importance[best_f] += (m / m0) * best_gain
        stack_start[top], stack_end[top], stack_node[top] = start, start + nl, next_node
        top += 1
        stack_start[top], stack_end[top], stack_node[top] = start + nl, end, next_node + 1
        top += 1
        next_node += 2
    return next_node


@njit(cache=True)
def _predict_tree(X, feature, threshold, left, right, value, out):
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        for t in range(value.shape[1]):
            out[i, t] += value[node, t]


class Tree:
    """One fitted CART regression tree (flat array representation)."""

    __slots__ = ("feature", "threshold", "left", "right", "value",
                 "importance")

    def __init__(self, feature, threshold, left, right, value, importance):
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.value = value
        self.importance = importance

    @property
    def n_splits(self):
        return int(np.sum(self.feature >= 0))


def grow_tree(X, Y, sample_idx=None):
    """Fit a single tree on X (n,F) and Y (n,T); no bootstrap by default."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if sample_idx is None:
        sample_idx = np.arange(X.shape[0], dtype=np.int64)
    m = len(sample_idx)
    cap = 2 * m + 2
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.zeros(cap, dtype=np.int64)
    right = np.zeros(cap, dtype=np.int64)
    value = np.zeros((cap, Y.shape[1]))
    importance = np.zeros(X.shape[1])
    count = _grow_tree(X, Y, np.asarray(sample_idx, dtype=np.int64),
                       feature, threshold, left, right, value, importance)
    return Tree(feature[:count].copy(), threshold[:count].copy(),
                left[:count].copy(), right[:count].copy(),
                value[:count].copy(), importance)


class RegressionForest:
    """Bootstrap ensemble of exact CART trees with importance accumulators."""

    def __init__(self, trees, n_targets, seed, feature_names=None):
        self.trees = trees
        self.n_targets = n_targets
        self.seed = seed
        self.feature_names = list(feature_names) if feature_names else None

    @property
    def n_features(self):
        return len(self.trees[0].importance)

    @property
    def split_count(self):
        return sum(t.n_splits for t in self.trees)

    def predict(self, X, feature_names=None):
        """Mean over trees of the leaf values; returns (n, n_targets)."""
        if feature_names is not None and self.feature_names is not None:
            if list(feature_names) != self.feature_names:
                raise ValueError(
                    f"feature schema mismatch: fitted on {self.feature_names}, "
                    f"got {list(feature_names)}")
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected (n, {self.n_features}) features")
        out = np.zeros((X.shape[0], self.n_targets))
        for tree in self.trees:
            _predict_tree(X, tree.feature, tree.threshold, tree.left,
                          tree.right, tree.value, out)
        return out / len(self.trees)

    def gini_importance(self):
        """Mean variance reduction per feature, normalized to sum 1.

        All-zero (no split anywhere in the forest) stays all-zero; check
        `split_count` to distinguish that case.
        """
        raw = np.mean([t.importance for t in self.trees], axis=0)
        total = raw.sum()
        return raw / total if total > 0 else raw

    def to_json(self):
        doc = {
            "schema": "zcproxy-forest-v1",
            "n_targets": self.n_targets,
            "seed": self.seed,
            "feature_names": self.feature_names,
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "threshold": t.threshold.tolist(),
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "value": t.value.tolist(),
                    "importance": t.importance.tolist(),
                }
                for t in self.trees
            ],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("schema") != "zcproxy-forest-v1":
            raise ValueError("not a zcproxy forest document")
        trees = [
            Tree(np.asarray(t["feature"], dtype=np.int64),
                 np.asarray(t["threshold"]),
                 np.asarray(t["left"], dtype=np.int64),
                 np.asarray(t["right"], dtype=np.int64),
                 np.asarray(t["value"]),
                 np.asarray(t["importance"]))
            for t in doc["trees"]
        ]
        return cls(trees, doc["n_targets"], doc["seed"], doc["feature_names"])


def fit_forest(X, Y, seed, n_trees=DEFAULT_TREES, bootstrap=True,
               feature_names=None):
    """Fit the 100-tree (by default) bootstrap forest.

    Each tree draws its own n-with-replacement sample from a generator
    seeded with seed + tree_index, making the fit reproducible and
    schedule independent.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise ValueError("row count mismatch between features and targets")
    if bootstrap and X.shape[0] < 10:
        raise ValueError("forest fitting needs at least 10 rows")
    if np.isnan(X).any() or np.isnan(Y).any():
        raise ValueError("NaN in features or targets")
    n = X.shape[0]
    trees = []
    for t in range(n_trees):
        if bootstrap:
            rng = np.random.default_rng(seed + t)
            idx = rng.integers(0, n, n).astype(np.int64)
        else:
            idx = np.arange(n, dtype=np.int64)
        trees.append(grow_tree(X, Y, idx))
    return RegressionForest(trees, Y.shape[1], seed, feature_names)


def predict(forest, X, feature_names=None):
    return forest.predict(X, feature_names)


def gini_importance(forest):
    return forest.gini_importance()


def permutation_importance(forest, X_test, Y_test, repeats=10, seed=0):
    """Mean and std of the R2 drop when one feature column is shuffled."""
    X_test = np.ascontiguousarray(X_test, dtype=np.float64)
    Y_test = np.asarray(Y_test, dtype=np.float64)
    if Y_test.ndim == 1:
        Y_test = Y_test[:, None]
    if X_test.shape[0] < 2:
        raise ValueError("permutation importance needs at least 2 test rows")
    baseline = r2_score(Y_test, forest.predict(X_test))
    rng = np.random.default_rng(seed)
    means = np.zeros(X_test.shape[1])
    stds = np.zeros(X_test.shape[1])
    for f in range(X_test.shape[1]):
        drops = np.zeros(repeats)
        for r in range(repeats):
            shuffled = X_test.copy()
            shuffled[:, f] = shuffled[rng.permutation(X_test.shape[0]), f]
            drops[r] = baseline - r2_score(Y_test, forest.predict(shuffled))
        means[f] = drops.mean()
        stds[f] = drops.std()
    return baseline, means, stds
