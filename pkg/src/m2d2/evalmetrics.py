"""Ranking metrics, entropy-gated selective prediction and bootstrap CIs.

Undefined metrics (a retained set with a single class, no positives) are
reported as NaN and masked out of every average.

Both ranking metrics are computed from exact integer counts: AUROC as
2U / (2·P·N) and AUPRC as an exactly rounded sum (``math.fsum``) of
per-positive precisions, each an integer ratio. Any two code paths that see
the same retained set therefore return bit-identical floats.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import entr

FRACTIONS = np.arange(100) / 100.0
METRIC_NAMES = ("auroc", "auprc", "sel_auroc", "sel_auprc")
_MATRIX_LIMIT = 1500


def bernoulli_entropy(p):
    """Per-entry entropy in nats, 0·ln 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    return entr(p) + entr(1.0 - p)


@dataclass
class PredictionSet:
    probs: np.ndarray
    labels: np.ndarray
    entropies: np.ndarray = None

    def __post_init__(self):
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=np.float64))
        if self.probs.shape != self.labels.shape or self.probs.shape[0] < 1:
            raise ValueError(f"probs {self.probs.shape} and labels {self.labels.shape} must match, n >= 1")
        if self.entropies is None:
            self.entropies = bernoulli_entropy(self.probs)

    @property
    def n(self):
        return self.probs.shape[0]

    @property
    def num_labels(self):
        return self.probs.shape[1]

    def take(self, rows):
        return PredictionSet(self.probs[rows], self.labels[rows], self.entropies[rows])


@dataclass
class SelectiveCurve:
    rejection_fractions: np.ndarray
    values: np.ndarray
    defined: np.ndarray
    retained: np.ndarray = field(default=None)

    @property
    def average(self):
        return float(np.mean(self.values[self.defined])) if self.defined.any() else math.nan


def auroc(scores, labels):
    """P(random positive outranks random negative), ties counted one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) > 0.5
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    sv = np.sort(s, kind="stable")
    # twice the 1-based mid-rank of every score: first + last position + 2
    twice_rank = np.searchsorted(sv, s, "left") + np.searchsorted(sv, s, "right") + 1
    twice_u = int(twice_rank[y].sum()) - n_pos * (n_pos + 1)
    return float(np.float64(twice_u) / np.float64(2 * n_pos * n_neg))


def auprc(scores, labels):
    """Average precision in descending-score order, ties by input order."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) > 0.5
    n_pos = int(y.sum())
    if n_pos == 0:
        return math.nan
    order = np.argsort(-s, kind="stable")
    ys = y[order]
    tp = np.cumsum(ys)
    prec = tp[ys] / (np.flatnonzero(ys) + 1.0)
    return math.fsum(prec.tolist()) / n_pos


BASE_METRICS = {"auroc": auroc, "auprc": auprc}


def retained_counts(n):
    return n - (n * np.arange(100)) // 100


def _sweep_loop(scores, labels, order, metric):
    fn = BASE_METRICS[metric]
    out = np.empty(100)
    for i, keep in enumerate(retained_counts(len(scores))):
        kept = np.sort(order[:keep])
        out[i] = fn(scores[kept], labels[kept])
    return out


def _sweep_matrix(scores, labels, order, metric):
    s = scores[order]
    y = labels[order] > 0.5
    n = len(s)
    lengths = retained_counts(n)
    cols = lengths - 1
    pos_cum = np.cumsum(y)
    n_pos = pos_cum[cols]
    if metric == "auroc":
        pair = 2 * (s[:, None] > s[None, :]).astype(np.int64) + (s[:, None] == s[None, :])
        pair *= y[:, None] & ~y[None, :]
        twice_u = np.cumsum(np.cumsum(pair, axis=0), axis=1)[cols, cols]
        n_neg = lengths - n_pos
        with np.errstate(invalid="ignore", divide="ignore"):
            vals = twice_u.astype(np.float64) / (2 * n_pos * n_neg).astype(np.float64)
        vals[(n_pos == 0) | (n_neg == 0)] = math.nan
        return vals
    # global descending-score rank, ties by original index, decides "ranked at or above"
    glob = np.empty(n, dtype=np.int64)
    glob[np.argsort(-scores, kind="stable")] = np.arange(n)
    r = glob[order]
    above = r[None, :] <= r[:, None]
    c_all = np.cumsum(above, axis=1)
    c_pos = np.cumsum(above & y[None, :], axis=1)
    vals = np.empty(100)
    for i, (length, col) in enumerate(zip(lengths, cols)):
        if n_pos[i] == 0:
            vals[i] = math.nan
            continue
        rows = np.flatnonzero(y[:length])
        prec = c_pos[rows, col] / c_all[rows, col]
        vals[i] = math.fsum(prec.tolist()) / int(n_pos[i])
    return vals


def selective_sweep(preds, k, base_metric="auroc"):
    """Reject the ⌊n·f⌋ highest-entropy rows for f = 0.00..0.99; score the rest.

    Returns (curve, average over fractions where the metric is defined).
    """
    if base_metric not in BASE_METRICS:
        raise ValueError(f"base_metric must be one of {tuple(BASE_METRICS)}, got {base_metric!r}")
    scores = preds.probs[:, k]
    labels = preds.labels[:, k]
    order = np.argsort(preds.entropies[:, k], kind="stable")
    sweep = _sweep_matrix if len(scores) <= _MATRIX_LIMIT else _sweep_loop
    vals = sweep(scores, labels, order, base_metric)
    curve = SelectiveCurve(FRACTIONS.copy(), vals, ~np.isnan(vals), retained_counts(len(scores)))
    return curve, curve.average


def aggregate_labels(values):
    """Unweighted mean over defined labels; returns (mean, skipped_count)."""
    v = np.asarray(values, dtype=np.float64)
    ok = ~np.isnan(v)
    skipped = int((~ok).sum())
    if not ok.any():
        return math.nan, skipped
    return float(np.mean(v[ok])), skipped


def label_metrics(preds, k):
    """(AUROC, AUPRC, selective AUROC, selective AUPRC) for label k."""
    s, y = preds.probs[:, k], preds.labels[:, k]
    return np.array(
        [
            auroc(s, y),
            auprc(s, y),
            selective_sweep(preds, k, "auroc")[1],
            selective_sweep(preds, k, "auprc")[1],
        ]
    )


def _threads():
    try:
        return max(1, int(os.environ.get("M2D2_THREADS", "1")))
    except ValueError:
        return 1


def per_label_table(preds):
    """[Q, 4] matrix of label_metrics; labels run in parallel up to M2D2_THREADS."""
    q = preds.num_labels
    workers = min(_threads(), q)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda k: label_metrics(preds, k), range(q)))
    else:
        rows = [label_metrics(preds, k) for k in range(q)]
    return np.vstack(rows)


def summary_vector(preds):
    """Flattened per-label metrics followed by the 4 label-averaged aggregates."""
    table = per_label_table(preds)
    agg = [aggregate_labels(table[:, j])[0] for j in range(4)]
    return np.concatenate([table.reshape(-1), agg])


def aggregate_metrics(preds):
    """The 4-vector (AUROC, AUPRC, sel-AUROC, sel-AUPRC) averaged over labels."""
    table = per_label_table(preds)
    return np.array([aggregate_labels(table[:, j])[0] for j in range(4)])


def bootstrap_ci(preds, metric_fn, resamples=1000, rng=None, max_draw_factor=10):
    """Percentile bootstrap: (point, lo, hi) from 2.5/97.5 percentiles.

    ``metric_fn`` maps a PredictionSet to a scalar or vector; NaN entries of a
    resample are skipped and redrawn, up to ``max_draw_factor * resamples`` draws.
    """
    if resamples < 100:
        raise ValueError("resamples must be >= 100")
    rng = np.random.default_rng(0) if rng is None else rng
    point = np.asarray(metric_fn(preds), dtype=np.float64)
    scalar = point.ndim == 0
    point = np.atleast_1d(point)
    collected = [[] for _ in range(point.size)]
    draws = 0
    while draws < max_draw_factor * resamples:
        if min(len(c) for c in collected) >= resamples:
            break
        rows = rng.integers(0, preds.n, size=preds.n)
        draws += 1
        vals = np.atleast_1d(np.asarray(metric_fn(preds.take(rows)), dtype=np.float64))
        for j, v in enumerate(vals):
            if not np.isnan(v) and len(collected[j]) < resamples:
                collected[j].append(v)
    lo = np.array([np.percentile(c, 2.5) if c else math.nan for c in collected])
    hi = np.array([np.percentile(c, 97.5) if c else math.nan for c in collected])
    if scalar:
        return float(point[0]), float(lo[0]), float(hi[0])
    return point, lo, hi


def metrics_report(preds, resamples=1000, seed=0, label_names=None):
    """Per-label and aggregate metrics with bootstrap CIs (plain dict, JSON-ready)."""
    q = preds.num_labels
    label_names = label_names or [f"Label {k + 1}" for k in range(q)]
    point, lo, hi = bootstrap_ci(preds, summary_vector, resamples, np.random.default_rng(seed))

    def triple(j):
        return {"point": _num(point[j]), "lo": _num(lo[j]), "hi": _num(hi[j])}

    per_label = []
    for k in range(q):
        row = {"label": label_names[k], "prevalence": float(np.mean(preds.labels[:, k]))}
        for j, name in enumerate(METRIC_NAMES):
            row[name] = triple(4 * k + j)
        per_label.append(row)
    base = 4 * q
    aggregate = {name: triple(base + j) for j, name in enumerate(METRIC_NAMES)}
    skipped = {
        name: int(np.isnan(point[j : base : 4]).sum()) for j, name in enumerate(METRIC_NAMES)
    }
    return {"per_label": per_label, "aggregate": aggregate, "skipped_labels": skipped}


def _num(x):
    return None if np.isnan(x) else float(x)
