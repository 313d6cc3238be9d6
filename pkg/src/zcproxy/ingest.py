"""Ingestion of external proxy / accuracy tables (CSV or JSON).

Schema: one row per (arch_index, dataset). Required columns: arch_index,
dataset, clean. Optional columns: any subset of the 15 canonical proxies,
and robust accuracies named '<attack>@<eps>', e.g. 'pgd@1/255', with
attack in {fgsm, pgd, aa-apgd-ce, aa-square} and eps written as a /255
fraction. Accuracies live in [0,1]; percent-scale inputs are converted
(explicitly via the percent flag, or auto-detected and flagged). Lines
starting with '#' are comments.
"""
from __future__ import annotations

import csv
import json
import re

import numpy as np

from .proxies import CANONICAL_PROXIES
from .space import NUM_ARCHS

ROBUST_ATTACKS = ("fgsm", "pgd", "aa-apgd-ce", "aa-square")
# short aliases accepted on CLI / config surfaces
ATTACK_ALIASES = {"fgsm": "fgsm", "pgd": "pgd", "apgd": "aa-apgd-ce",
                  "aa-apgd-ce": "aa-apgd-ce", "square": "aa-square",
                  "aa-square": "aa-square"}

_ROBUST_RE = re.compile(r"^(fgsm|pgd|aa-apgd-ce|aa-square)@([0-9.]+/255)$")

REQUIRED_COLUMNS = ("arch_index", "dataset", "clean")


class IngestError(ValueError):
    """The input table violates the documented schema."""


def robust_column(attack, eps):
    """Canonical robust-accuracy column name for an attack and eps string."""
    attack = ATTACK_ALIASES.get(attack)
    if attack is None:
        raise IngestError(f"unknown attack name: expected one of "
                          f"{sorted(set(ATTACK_ALIASES))}")
    if not re.match(r"^[0-9.]+/255$", str(eps)):
        raise IngestError(f"eps must be written as '<value>/255', got {eps!r}")
    return f"{attack}@{eps}"


def eps_value(eps):
    """Numeric value of an '<x>/255' eps string."""
    return float(eps.split("/")[0]) / 255.0


class IngestTable:
    """Validated table of proxies and accuracies keyed by (arch_index, dataset)."""

    def __init__(self, keys, columns, warnings=None, rejected=None, meta=None):
        self.keys = keys                # list of (arch_index, dataset)
        self.columns = columns          # name -> float64 array (NaN = missing)
        self.warnings = warnings or []
        self.rejected = rejected or []  # (line_number, reason)
        self.meta = meta or {}

    def __len__(self):
        return len(self.keys)

    @property
    def proxy_columns(self):
        return [p for p in CANONICAL_PROXIES if p in self.columns]

    @property
    def accuracy_columns(self):
        cols = ["clean"]
        robust = [c for c in self.columns if _ROBUST_RE.match(c)]

        def sort_key(c):
            attack, eps = c.split("@")
            return (ROBUST_ATTACKS.index(attack), eps_value(eps))

        return cols + sorted(robust, key=sort_key)

    def datasets(self):
        seen = []
        for _, ds in self.keys:
            if ds not in seen:
                seen.append(ds)
        return seen

    def for_dataset(self, dataset_id):
        mask = np.array([ds == dataset_id for _, ds in self.keys])
        if not mask.any():
            raise IngestError(f"dataset {dataset_id!r} not present; available: "
                              f"{self.datasets()}")
        keys = [k for k, keep in zip(self.keys, mask) if keep]
        columns = {name: arr[mask] for name, arr in self.columns.items()}
        return IngestTable(keys, columns, self.warnings, self.rejected,
                           self.meta)

    def summary(self):
        lines = [f"rows: {len(self.keys)}",
                 f"datasets: {', '.join(self.datasets())}",
                 f"proxy columns: {', '.join(self.proxy_columns)}",
                 f"accuracy columns: {', '.join(self.accuracy_columns)}",
                 f"rejected rows: {len(self.rejected)}",
                 f"warnings: {len(self.warnings)}"]
        return "\n".join(lines)


def _parse_rows(raw_rows, percent, flops_units):
    """raw_rows: iterable of (line_number, dict of column -> raw value)."""
    rows = []
    rejected = []
    warnings = []
    first_line = {}
    seen = {}
    columns_present = None
    for lineno, raw in raw_rows:
        if columns_present is None:
            columns_present = list(raw.keys())
            missing = [c for c in REQUIRED_COLUMNS if c not in columns_present]
            if missing:
                raise IngestError(f"missing required columns: {missing}")
            for col in columns_present:
                if col in REQUIRED_COLUMNS or col in CANONICAL_PROXIES:
                    continue
                if not _ROBUST_RE.match(col):
                    raise IngestError(
                        f"unrecognized column {col!r}; robust columns must "
                        f"look like 'pgd@1/255'")
        try:
            arch = int(str(raw["arch_index"]).strip())
            if not 0 <= arch < NUM_ARCHS:
                raise ValueError(f"arch_index {arch} outside [0, {NUM_ARCHS - 1}]")
            dataset = str(raw["dataset"]).strip()
            if not dataset:
                raise ValueError("empty dataset id")
            values = {}
            for col in columns_present:
                if col in ("arch_index", "dataset"):
                    continue
                cell = raw.get(col)
                if cell is None or str(cell).strip() == "":
                    values[col] = np.nan
                else:
                    values[col] = float(cell)
        except (ValueError, TypeError) as err:
            rejected.append((lineno, str(err)))
            continue
        key = (arch, dataset)
        if key in seen:
            raise IngestError(
                f"duplicate key {key}: lines {seen[key]} and {lineno}")
        seen[key] = lineno
        first_line[key] = lineno
        rows.append((key, values))
    if columns_present is None:
        raise IngestError("empty input table")

    keys = [k for k, _ in rows]
    columns = {}
    for col in columns_present:
        if col in ("arch_index", "dataset"):
            continue
        columns[col] = np.array([v[col] for _, v in rows], dtype=np.float64)

    acc_cols = ["clean"] + [c for c in columns if _ROBUST_RE.match(c)]
    for col in acc_cols:
        arr = columns[col]
        finite = arr[np.isfinite(arr)]
        if finite.size == 0:
            continue
        scaled = percent
        if not percent and finite.max() > 1.0 and finite.max() <= 100.0:
            scaled = True
            warnings.append(f"column {col!r} looks percent-scaled "
                            f"(max {finite.max():.3f}); auto-converted")
        if scaled:
            columns[col] = arr / 100.0
        finite = columns[col][np.isfinite(columns[col])]
        if finite.size and (finite.min() < 0.0 or finite.max() > 1.0):
            raise IngestError(f"accuracy column {col!r} outside [0, 1] after "
                              f"unit normalization")
    if flops_units not in ("mac", "2mac"):
        raise IngestError("flops_units must be 'mac' or '2mac'")
    if "flops" in columns and flops_units == "2mac":
        columns["flops"] = columns["flops"] / 2.0
        warnings.append("flops column converted from 2x-MAC to MAC units")
    meta = {"flops_units": "mac", "percent_normalized": bool(percent)}
    return IngestTable(keys, columns, warnings, rejected, meta)


def ingest(path, format=None, percent=False, flops_units="mac"):
    """Read and validate a proxy/accuracy table. Returns an IngestTable."""
    if format is None:
        format = "json" if str(path).endswith(".json") else "csv"
    if format == "csv":
        def gen():
            with open(path, newline="") as fh:
                header = None
                for lineno, line in enumerate(fh, start=1):
                    if line.lstrip().startswith("#") or not line.strip():
                        continue
                    cells = next(csv.reader([line]))
                    if header is None:
                        header = [c.strip() for c in cells]
                        continue
                    yield lineno, dict(zip(header, cells))
        return _parse_rows(gen(), percent, flops_units)
    if format == "json":
        with open(path) as fh:
            doc = json.load(fh)
        rows = doc["rows"] if isinstance(doc, dict) else doc
        return _parse_rows(((i + 1, row) for i, row in enumerate(rows)),
                           percent, flops_units)
    raise IngestError(f"unknown format {format!r} (expected csv or json)")


def export(table, path):
    """Write a table back out in canonical column order."""
    robust = [c for c in table.accuracy_columns if c != "clean"]
    cols = table.proxy_columns + ["clean"] + robust
    with open(path, "w", newline="") as fh:
        for key, value in table.meta.items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh)
        writer.writerow(["arch_index", "dataset"] + cols)
        for i, (arch, ds) in enumerate(table.keys):
            row = [str(arch), ds]
            for col in cols:
                v = table.columns[col][i]
                row.append("" if np.isnan(v) else repr(float(v)))
            writer.writerow(row)
