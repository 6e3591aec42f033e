"""Ranking metrics, representation distances and the per-run metrics log."""

from __future__ import annotations

import csv
import io
import json

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import rankdata


def binary_auc(scores, positives):
    """ROC AUC from the Mann-Whitney U statistic (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _label_matrix(labels, num_classes):
    labels = np.asarray(labels)
    if labels.ndim == 1:
        onehot = np.zeros((labels.size, num_classes), dtype=bool)
        onehot[np.arange(labels.size), labels.astype(int)] = True
        return onehot
    return labels.astype(bool)


def per_class_auc(scores, labels):
    """One-vs-rest AUC per scoreable class.

    ``labels`` is either a vector of class indices or a [K, C] multi-hot
    matrix. Returns ``(aucs, skipped)`` where ``aucs`` maps class -> AUC.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = np.stack([-scores, scores], axis=1)
    y = _label_matrix(labels, scores.shape[1])
    aucs, skipped = {}, 0
    for c in range(scores.shape[1]):
        pos = y[:, c]
        if pos.all() or not pos.any():
            skipped += 1
            continue
        aucs[c] = binary_auc(scores[:, c], pos)
    return aucs, skipped


def macro_auc(scores, labels):
    aucs, _ = per_class_auc(scores, labels)
    if not aucs:
        raise ValueError("no class has both positive and negative examples")
    return float(np.mean(list(aucs.values())))


def distance_split(reps, patient_ids, bins=30):
    """Pairwise Euclidean distances split by same-patient vs different-patient pairs.

    Each unordered pair is counted once.
    """
    reps = np.asarray(reps, dtype=np.float64)
    if len(reps) < 2:
        raise ValueError("need at least two representations")
    ids = np.asarray(patient_ids, dtype=object)
    d = pdist(reps)
    i, j = np.triu_indices(len(reps), k=1)
    same = ids[i] == ids[j]
    intra, inter = d[same], d[~same]
    edges = np.histogram_bin_edges(d, bins=bins)
    summary = {
        "intra_mean": float(intra.mean()) if intra.size else float("nan"),
        "intra_std": float(intra.std()) if intra.size else float("nan"),
        "inter_mean": float(inter.mean()) if inter.size else float("nan"),
        "inter_std": float(inter.std()) if inter.size else float("nan"),
        "intra_count": int(intra.size),
        "inter_count": int(inter.size),
        "hist_edges": edges.tolist(),
        "hist_intra": np.histogram(intra, bins=edges)[0].tolist(),
        "hist_inter": np.histogram(inter, bins=edges)[0].tolist(),
    }
    return intra, inter, summary


class MetricsLog:
    """Long-format per-epoch metrics plus a final summary dictionary."""

    def __init__(self):
        self.rows = []
        self.summary = {}

    def log(self, epoch, split, metric, value):
        if self.rows and epoch < self.rows[-1][0]:
            raise ValueError("epochs must be logged in non-decreasing order")
        self.rows.append((int(epoch), split, metric, float(value)))

    def series(self, split, metric):
        return [v for _, s, m, v in self.rows if s == split and m == metric]

    def extend(self, other):
        for row in other.rows:
            self.log(*row)
        self.summary.update(other.summary)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "metric", "value"])
        for epoch, split, metric, value in self.rows:
            w.writerow([epoch, split, metric, repr(value)])
        return buf.getvalue()

    def summary_json(self):
        return json.dumps(self.summary, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset, tuple)):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
