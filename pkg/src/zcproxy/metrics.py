"""Regression and rank-correlation metrics."""
from __future__ import annotations

import numpy as np


class ConstantInputError(ValueError):
    """The metric is undefined because an input has no variation."""


def r2_score(y_true, y_pred):
    """Coefficient of determination, 1 - SS_res/SS_tot.

    Multi-column targets are scored per column and averaged uniformly.
    A constant true column makes the score undefined.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.ndim == 1:
        y_true = y_true[:, None]
        y_pred = y_pred[:, None]
    if y_true.shape[0] < 2:
        raise ValueError("r2 needs at least 2 rows")
    scores = []
    for col in range(y_true.shape[1]):
        yt, yp = y_true[:, col], y_pred[:, col]
        ss_tot = float(np.sum((yt - yt.mean()) ** 2))
        if ss_tot == 0.0:
            raise ConstantInputError(f"target column {col} is constant")
        ss_res = float(np.sum((yt - yp) ** 2))
        scores.append(1.0 - ss_res / ss_tot)
    return float(np.mean(scores))


def _merge_count(values):
    """Number of inversions in `values`, counted by merge sort."""
    n = len(values)
    buf = values.copy()
    tmp = np.empty_like(buf)
    inversions = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            if mid >= hi:
                continue
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if buf[i] <= buf[j]:
                    tmp[k] = buf[i]
                    i += 1
                else:
                    tmp[k] = buf[j]
                    inversions += mid - i
                    j += 1
                k += 1
            while i < mid:
                tmp[k] = buf[i]
                i += 1
                k += 1
            while j < hi:
                tmp[k] = buf[j]
                j += 1
                k += 1
            buf[lo:hi] = tmp[lo:hi]
        width *= 2
    return inversions


def _tie_term(sorted_values):
    total = 0
    run = 1
    for i in range(1, len(sorted_values) + 1):
        if i < len(sorted_values) and sorted_values[i] == sorted_values[i - 1]:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    return total


def kendall_tau(a, b):
    """Tie-corrected Kendall rank correlation (tau-b), O(n log n).

    Undefined (raises ConstantInputError) when either list is all ties.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("kendall_tau expects two equal-length 1-D sequences")
    n = len(a)
    if n < 2:
        raise ValueError("kendall_tau needs at least 2 observations")
    order = np.lexsort((b, a))
    a_s, b_s = a[order], b[order]

    n0 = n * (n - 1) // 2
    n1 = _tie_term(a_s)                       # pairs tied in a
    n2 = _tie_term(np.sort(b, kind="stable"))  # pairs tied in b
    # pairs tied in both: runs of equal (a, b) under the lexicographic sort
    joint = 0
    run = 1
    for i in range(1, n + 1):
        if i < n and a_s[i] == a_s[i - 1] and b_s[i] == b_s[i - 1]:
            run += 1
        else:
            joint += run * (run - 1) // 2
            run = 1
    if n0 == n1 or n0 == n2:
        raise ConstantInputError("kendall tau undefined for all-tie input")
    # after sorting by (a, b), b is non-decreasing inside every a-run, so
    # counted inversions are exactly the strictly discordant pairs
    discordant = _merge_count(b_s)
    concordant = n0 - n1 - n2 + joint - discordant
    return float((concordant - discordant)
                 / np.sqrt(float(n0 - n1) * float(n0 - n2)))
