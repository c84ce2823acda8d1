"""Metrics reports (JSON) and the comparison tables built from them.

A report carries per-label and label-averaged metrics, each as
``{"point", "lo", "hi"}`` with 95% bootstrap bounds, plus enough metadata
(schema version, config hash, seed, mode) to line runs up later.
"""

import json
import math

import numpy as np

from .errors import FormatError
from .evalmetrics import METRIC_NAMES, metrics_report
from .trainer import hypervolume

SCHEMA_VERSION = 1
COLUMN_TITLES = ("AUROC", "AUPRC", "Selective AUROC", "Selective AUPRC")
REQUIRED_KEYS = ("schema_version", "name", "mode", "seed", "config_hash", "per_label", "aggregate")


def build_report(preds, *, name, mode, seed, config_hash, split, resamples=1000, boot_seed=0, label_names=None):
    body = metrics_report(preds, resamples, boot_seed, label_names)
    point = [body["aggregate"][k]["point"] for k in METRIC_NAMES]
    hv = None if any(p is None for p in point) else hypervolume(point)
    out = {
        "schema_version": SCHEMA_VERSION,
        "name": name,
        "mode": mode,
        "seed": int(seed),
        "config_hash": config_hash,
        "split": split,
        "n": int(preds.n),
        "mean_entropy": float(np.mean(preds.entropies)),
        "hypervolume": hv,
    }
    out.update(body)
    return out


def dumps_report(report):
    return json.dumps(report, indent=2, sort_keys=False) + "\n"


def load_report(path):
    with open(path) as fh:
        try:
            rep = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError("json", f"{path}: {exc}") from None
    if not isinstance(rep, dict):
        raise FormatError("json", f"{path}: top level must be an object")
    version = rep.get("schema_version")
    if version != SCHEMA_VERSION:
        raise FormatError("schema_version", f"{path}: expected {SCHEMA_VERSION}, found {version!r}")
    missing = [k for k in REQUIRED_KEYS if k not in rep]
    if missing:
        raise FormatError(missing[0], f"{path}: missing key")
    return rep


def _cell(triple):
    if triple is None or triple.get("point") is None:
        return "n/a"
    lo, hi = triple.get("lo"), triple.get("hi")
    if lo is None or hi is None:
        return f"{triple['point']:.3f}"
    return f"{triple['point']:.3f} ({lo:.3f}, {hi:.3f})"


def _align(header, rows):
    widths = [max(len(r[j]) for r in [header] + rows) for j in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    rule = "  ".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule] + [fmt(r) for r in rows]) + "\n"


def comparison_rows(reports):
    """(names, [R, 4] point matrix with NaN for undefined, [R][4] cell strings)."""
    names = [r["name"] for r in reports]
    points = np.array(
        [[math.nan if r["aggregate"][k]["point"] is None else r["aggregate"][k]["point"] for k in METRIC_NAMES]
         for r in reports]
    )
    cells = [[_cell(r["aggregate"][k]) for k in METRIC_NAMES] for r in reports]
    return names, points, cells


def comparison_text(reports):
    """Aligned text table; the best run per column is wrapped in ``**``."""
    names, points, cells = comparison_rows(reports)
    best = [np.nanmax(points[:, j]) if not np.all(np.isnan(points[:, j])) else None for j in range(4)]
    rows = []
    for i, name in enumerate(names):
        row = [name]
        for j in range(4):
            c = cells[i][j]
            if best[j] is not None and points[i, j] == best[j]:
                c = f"**{c}**"
            row.append(c)
        rows.append(row)
    return _align(["Model"] + list(COLUMN_TITLES), rows)


def comparison_tsv(reports):
    names, _, _ = comparison_rows(reports)
    head = ["model"]
    for k in METRIC_NAMES:
        head += [k, f"{k}_lo", f"{k}_hi"]
    lines = ["\t".join(head)]
    for name, rep in zip(names, reports):
        vals = [name]
        for k in METRIC_NAMES:
            vals += ["" if rep["aggregate"][k][p] is None else repr(rep["aggregate"][k][p]) for p in ("point", "lo", "hi")]
        lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"


def per_label_text(report):
    header = ["Label", "Prevalence"] + list(COLUMN_TITLES)
    rows = []
    for k, row in enumerate(report["per_label"], 1):
        rows.append([f"{k} {row['label']}", f"{row['prevalence']:.3f}"] + [_cell(row[m]) for m in METRIC_NAMES])
    return _align(header, rows)


def per_label_tsv(report):
    head = ["label", "prevalence"]
    for k in METRIC_NAMES:
        head += [k, f"{k}_lo", f"{k}_hi"]
    lines = ["\t".join(head)]
    for row in report["per_label"]:
        vals = [row["label"], repr(row["prevalence"])]
        for k in METRIC_NAMES:
            vals += ["" if row[k][p] is None else repr(row[k][p]) for p in ("point", "lo", "hi")]
        lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"


def render(reports):
    """Full plain-text report: comparison table then one per-label table per run."""
    parts = ["Test-set comparison\n", comparison_text(reports)]
    for rep in reports:
        parts.append(f"\nPer-label results: {rep['name']} ({rep['mode']}, seed {rep['seed']})\n")
        parts.append(per_label_text(rep))
    return "".join(parts)
