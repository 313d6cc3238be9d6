"""Report emission: CSV files with embedded config hashes, minimal SVG.

The SVG writers draw flat rectangles and text only, so reports carry no
plotting dependency and rerunning a configuration reproduces output files
byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import json

import numpy as np


def config_hash(config_dict):
    """Stable short hash of a JSON-serializable configuration."""
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _write_header(fh, config_dict, seeds=None):
    fh.write(f"# config_hash={config_hash(config_dict)}\n")
    if seeds is not None:
        fh.write(f"# seeds={','.join(str(s) for s in seeds)}\n")


def write_correlation_csv(path, report, config_dict):
    with open(path, "w", newline="") as fh:
        _write_header(fh, config_dict)
        writer = csv.writer(fh)
        writer.writerow(["proxy"] + report.accuracy_names)
        for i, name in enumerate(report.proxy_names):
            row = [name]
            for j in range(len(report.accuracy_names)):
                v = report.matrix[i, j]
                row.append("NA" if np.isnan(v) else repr(float(v)))
            writer.writerow(row)


def write_fit_csv(path, results, config_dict, seeds, extra_cols=None):
    """results: list of (label, FitResult [, extras...]) rows."""
    with open(path, "w", newline="") as fh:
        _write_header(fh, config_dict, seeds)
        writer = csv.writer(fh)
        header = ["scenario", "targets", "features", "r2_mean", "r2_std"]
        header += list(extra_cols or [])
        header += ["r2_per_seed"]
        writer.writerow(header)
        for row in results:
            label, res = row[0], row[1]
            extras = list(row[2:])
            writer.writerow(
                [label, "|".join(res.target_names),
                 "|".join(res.feature_names),
                 repr(res.r2_mean), repr(res.r2_std)] + extras
                + ["|".join(repr(v) for v in res.per_seed)])


def write_importance_csv(path, report, config_dict, seeds):
    with open(path, "w", newline="") as fh:
        _write_header(fh, config_dict, seeds)
        writer = csv.writer(fh)
        writer.writerow(["feature", "gini_mean", "gini_std",
                         "permutation_mean", "permutation_std", "rank"])
        rank = {name: i + 1 for i, name in enumerate(report.ranking)}
        for i, name in enumerate(report.feature_names):
            writer.writerow([name, repr(float(report.gini_mean[i])),
                             repr(float(report.gini_std[i])),
                             repr(float(report.perm_mean[i])),
                             repr(float(report.perm_std[i])),
                             rank[name]])


def write_robust_csv(path, rows, config_dict=None):
    """rows: iterable of (arch_index, dataset, attack, eps_string, accuracy)."""
    with open(path, "w", newline="") as fh:
        if config_dict is not None:
            _write_header(fh, config_dict)
        writer = csv.writer(fh)
        writer.writerow(["arch_index", "dataset", "attack", "epsilon",
                         "accuracy"])
        for arch, ds, attack, eps, acc in rows:
            writer.writerow([arch, ds, attack, eps, repr(float(acc))])


# ---------------------------------------------------------------------------
# SVG


def _esc(text):
    return (str(text).replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;"))


def _ramp(v):
    """Value in [0,1] to a blue-to-red fill."""
    v = min(max(float(v), 0.0), 1.0)
    r = int(round(255 * v))
    b = int(round(255 * (1.0 - v)))
    g = int(round(96 * (1.0 - abs(2 * v - 1.0))))
    return f"#{r:02x}{g:02x}{b:02x}"


def svg_heatmap(path, matrix, row_labels, col_labels, title=""):
    """Write a labeled heatmap of values in [0,1]; NaN cells render gray."""
    matrix = np.asarray(matrix, dtype=np.float64)
    cell, left, top = 28, 120, 90
    width = left + cell * len(col_labels) + 20
    height = top + cell * len(row_labels) + 20
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" font-family="monospace" font-size="11">']
    if title:
        parts.append(f'<text x="10" y="16">{_esc(title)}</text>')
    for j, lab in enumerate(col_labels):
        x = left + j * cell + cell // 2
        parts.append(f'<text x="{x}" y="{top - 6}" '
                     f'transform="rotate(-60 {x} {top - 6})">{_esc(lab)}</text>')
    for i, lab in enumerate(row_labels):
        y = top + i * cell + cell // 2 + 4
        parts.append(f'<text x="6" y="{y}">{_esc(lab)}</text>')
        for j in range(len(col_labels)):
            v = matrix[i, j]
            fill = "#b0b0b0" if np.isnan(v) else _ramp(v)
            x = left + j * cell
            y0 = top + i * cell
            parts.append(f'<rect x="{x}" y="{y0}" width="{cell - 2}" '
                         f'height="{cell - 2}" fill="{fill}"/>')
            label = "NA" if np.isnan(v) else f"{v:.2f}"
            parts.append(f'<text x="{x + 2}" y="{y0 + cell // 2 + 4}" '
                         f'font-size="8" fill="white">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def svg_bars(path, names, values, stds=None, title="", order=None):
    """Horizontal bar chart; `order` gives the top-to-bottom arrangement."""
    values = np.asarray(values, dtype=np.float64)
    if order is None:
        order = list(range(len(names)))
    vmax = max(float(np.max(values)), 1e-12)
    bar_h, left, top = 20, 120, 40
    width = left + 360
    height = top + bar_h * len(names) + 16
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" font-family="monospace" font-size="11">']
    if title:
        parts.append(f'<text x="10" y="16">{_esc(title)}</text>')
    for row, idx in enumerate(order):
        y = top + row * bar_h
        w = max(0.0, float(values[idx])) / vmax * 300.0
        parts.append(f'<text x="6" y="{y + 14}">{_esc(names[idx])}</text>')
        parts.append(f'<rect x="{left}" y="{y + 3}" width="{w:.1f}" '
                     f'height="{bar_h - 6}" fill="#4878cf"/>')
        if stds is not None:
            err = float(stds[idx]) / vmax * 300.0
            cx = left + w
            ymid = y + bar_h // 2
            parts.append(f'<line x1="{cx - err:.1f}" y1="{ymid}" '
                         f'x2="{cx + err:.1f}" y2="{ymid}" '
                         f'stroke="#303030" stroke-width="1"/>')
        parts.append(f'<text x="{left + w + 4:.1f}" y="{y + 14}" '
                     f'font-size="9">{values[idx]:.4f}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
