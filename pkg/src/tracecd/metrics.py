"""Graph comparison against interventional ground truth."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from .graphs import InstanceGraph

METRICS = ("shd", "precision", "recall", "f1")


@dataclass
class GraphScore:
    shd: int
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    n_pairs: int


def score_counts(tp: int, fp: int, fn: int, n_pairs: int = 0) -> GraphScore:
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        # nothing predicted: vacuously precise only if nothing was missed
        precision = 1.0 if fn == 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return GraphScore(fp + fn, precision, recall, f1, tp, fp, fn, n_pairs)


def compare_graphs(predicted: InstanceGraph, truth: InstanceGraph) -> GraphScore:
    """Directed edge counts over the pairs both graphs evaluated."""
    if predicted.n_nodes != truth.n_nodes:
        raise ValueError(f"graphs have {predicted.n_nodes} and {truth.n_nodes} nodes")
    both = predicted.testable & truth.testable
    pred = {e for e in predicted.edges if both[e]}
    true = {e for e in truth.edges if both[e]}
    tp = len(pred & true)
    return score_counts(tp, len(pred - true), len(true - pred), int(both.sum()))


def compare_edge_sets(predicted: set, truth: set) -> GraphScore:
    """Plain set comparison, e.g. for summary graphs."""
    tp = len(predicted & truth)
    return score_counts(tp, len(predicted - truth), len(truth - predicted))


@dataclass
class RunSummary:
    scores: list
    mean: dict
    std: dict
    fingerprint: str = ""

    def row(self, metric: str, digits: int = 2) -> str:
        return f"{self.mean[metric]:.{digits}f} ± {self.std[metric]:.{digits}f}"

    def table_row(self, name: str) -> str:
        return " | ".join([name, self.row("shd", 1), self.row("f1"), self.row("precision"),
                           self.row("recall")])

    def to_dict(self) -> dict:
        return {"n": len(self.scores), "mean": self.mean, "std": self.std,
                "fingerprint": self.fingerprint}


def aggregate(scores, config=None) -> RunSummary:
    """Mean and sample standard deviation (zero for a single score) per metric."""
    scores = list(scores)
    if not scores:
        raise ValueError("nothing to aggregate")
    mean, std = {}, {}
    for k in METRICS + ("tp", "fp", "fn"):
        vals = np.array([getattr(s, k) for s in scores], dtype=np.float64)
        mean[k] = float(vals.mean())
        std[k] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    fp = ""
    if config is not None:
        fp = hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]
    return RunSummary(scores, mean, std, fp)


CSV_FIELDS = ["sequence", "method"] + [f for f in GraphScore.__dataclass_fields__]


def scores_to_csv(rows) -> str:
    """``rows`` is an iterable of (sequence index, method, GraphScore)."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for idx, method, s in rows:
        d = asdict(s)
        d = {k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in d.items()}
        w.writerow({"sequence": idx, "method": method, **d})
    return buf.getvalue()
