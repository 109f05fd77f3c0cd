"""Subject-level soft voting, F1, ROC AUC and run aggregation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass
class PredictionSet:
    sample_ids: np.ndarray
    sample_labels: np.ndarray
    sample_probs: np.ndarray
    subject_ids: np.ndarray
    subject_labels: np.ndarray
    subject_probs: np.ndarray

    def subject_table(self) -> str:
        lines = ["subject_id,label,probability"]
        for sid, y, p in zip(self.subject_ids, self.subject_labels, self.subject_probs):
            lines.append(f"{sid},{int(y)},{p!r}")
        return "\n".join(lines) + "\n"


def soft_vote(subject_ids, labels, probs) -> PredictionSet:
    """Unweighted mean of each subject's sample probabilities (subjects sorted by id)."""
    subject_ids = np.asarray(subject_ids)
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if np.any((probs < 0) | (probs > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    uniq, inverse = np.unique(subject_ids, return_inverse=True)
    sub_labels = np.empty(uniq.size, dtype=np.int64)
    sub_probs = np.empty(uniq.size)
    for k in range(uniq.size):
        members = inverse == k
        ys = np.unique(labels[members])
        if ys.size != 1:
            raise ValueError(f"subject {uniq[k]} has conflicting labels {ys}")
        sub_labels[k] = ys[0]
        sub_probs[k] = math.fsum(np.sort(probs[members])) / members.sum()
    return PredictionSet(subject_ids, labels, probs, uniq, sub_labels, sub_probs)


def confusion(labels, probs, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) with p >= threshold predicted positive."""
    y = np.asarray(labels)
    pred = np.asarray(probs) >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return tp, fp, tn, fn


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * (precision * recall) / (precision + recall)


def f1_score(labels, probs, threshold: float = 0.5) -> float:
    if len(labels) == 0:
        raise ValueError("empty prediction set")
    tp, fp, _, fn = confusion(labels, probs, threshold)
    return f1_from_counts(tp, fp, fn)


def auc_roc(labels, scores) -> float:
    """Mann-Whitney AUC from average ranks; ties earn half credit."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need both classes")
    ranks = rankdata(s)  # average ranks are exact half-integers
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    f1: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    f1_degenerate: bool = False

    @property
    def n_subjects(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self._items())

    def _items(self):
        return [("f1", repr(self.f1)), ("auc", repr(self.auc)), ("tp", self.tp), ("fp", self.fp),
                ("tn", self.tn), ("fn", self.fn), ("n_subjects", self.n_subjects),
                ("f1_degenerate", int(self.f1_degenerate))]

    @staticmethod
    def csv_header() -> str:
        return "f1,auc,tp,fp,tn,fn,n_subjects,f1_degenerate"

    def csv_row(self) -> str:
        return ",".join(str(v) for _, v in self._items())

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = dict(line.split(" = ", 1) for line in text.splitlines() if line.strip())
        return cls(float(kv["f1"]), float(kv["auc"]), int(kv["tp"]), int(kv["fp"]),
                   int(kv["tn"]), int(kv["fn"]), bool(int(kv["f1_degenerate"])))


def evaluate(preds: PredictionSet, threshold: float = 0.5) -> EvalReport:
    tp, fp, tn, fn = confusion(preds.subject_labels, preds.subject_probs, threshold)
    precision_recall_zero = tp == 0
    return EvalReport(f1_from_counts(tp, fp, fn), auc_roc(preds.subject_labels, preds.subject_probs),
                      tp, fp, tn, fn, precision_recall_zero)


@dataclass
class MetricSummary:
    mean: float
    std: float | None

    def cell(self) -> str:
        if self.std is None:
            return f"{self.mean:.2f}"
        return f"{self.mean:.2f} ({self.std:.2f})"


@dataclass
class RunSummary:
    n_runs: int
    metrics: dict[str, MetricSummary] = field(default_factory=dict)


def _summarize(values: Sequence[float]) -> MetricSummary:
    # fsum keeps the summary independent of run order
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return MetricSummary(mean, None)
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return MetricSummary(mean, math.sqrt(var))


def aggregate_runs(reports: Sequence[EvalReport]) -> RunSummary:
    if not reports:
        raise ValueError("no reports to aggregate")
    return RunSummary(len(reports), {"f1": _summarize([r.f1 for r in reports]),
                                     "auc": _summarize([r.auc for r in reports])})


def format_table(rows: Sequence[tuple[str, str, RunSummary]]) -> str:
    """Rows of (method, features, summary) as a CSV with "mean (std)" cells."""
    lines = ["method,features,n_runs,f1,auc"]
    for method, features, summary in rows:
        lines.append(f"{method},{features},{summary.n_runs},"
                     f"{summary.metrics['f1'].cell()},{summary.metrics['auc'].cell()}")
    return "\n".join(lines) + "\n"
