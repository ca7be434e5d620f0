"""Classification metrics in the reporting convention of the comparison tables.

Sensitivity and specificity are micro-averaged over one-vs-rest splits.
Pooling TP and FN over all classes counts every sample exactly once as a
positive, so micro sensitivity always equals accuracy, and micro
specificity reduces to ``1 - (1 - accuracy) / (C - 1)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

REPORT_COLUMNS = ["accuracy", "sensitivity", "specificity", "f1", "roc_auc"]


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed by (true class, predicted class)."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Per-class (TP, FP, FN, TN)."""
        m = self.counts
        tp = np.diag(m).astype(np.int64)
        fp = m.sum(axis=0) - tp
        fn = m.sum(axis=1) - tp
        tn = m.sum() - tp - fp - fn
        return tp, fp, fn, tn


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions but {labels.size} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} ids must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def basic_rates(cm: ConfusionMatrix) -> Tuple[float, float, float]:
    """(accuracy, micro sensitivity, micro specificity)."""
    n = cm.total
    if n == 0:
        raise ValueError("confusion matrix is empty")
    tp, fp, fn, tn = cm.one_vs_rest()
    accuracy = float(np.trace(cm.counts)) / n
    sensitivity = float(tp.sum()) / float((tp + fn).sum())
    specificity = float(tn.sum()) / float((tn + fp).sum())
    return accuracy, sensitivity, specificity


def f1_scores(cm: ConfusionMatrix) -> Tuple[float, float, np.ndarray]:
    """(support-weighted F1, macro F1, per-class F1); 0 where P + R == 0."""
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    precision, recall, support = precision_recall(cm)
    denom = precision + recall
    per_class = np.divide(2 * precision * recall, denom, out=np.zeros_like(denom), where=denom > 0)
    macro = float(per_class.mean())
    weighted = float((per_class * support).sum() / support.sum())
    return weighted, macro, per_class


def precision_recall(cm: ConfusionMatrix) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp, fp, fn, _ = cm.one_vs_rest()
    predicted = (tp + fp).astype(np.float64)
    support = (tp + fn).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros(len(tp)), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros(len(tp)), where=support > 0)
    return precision, recall, support


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(xs)]))
    ranks = np.empty(len(x), dtype=np.float64)
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + 1 + e) / 2.0
    return ranks


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney estimate: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = _average_ranks(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_ovr(scores, labels, num_classes: Optional[int] = None) -> Tuple[float, np.ndarray]:
    """Macro one-vs-rest AUC and per-class AUC (NaN for skipped classes).

    A class without positives or without negatives is left out of the
    macro mean; if every class is left out a ValueError is raised.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"scores {scores.shape} do not match {labels.shape[0]} labels")
    if labels.size < 2:
        raise ValueError("AUC needs at least two samples")
    c = num_classes or scores.shape[1]
    per_class = np.full(c, np.nan)
    for k in range(c):
        pos = labels == k
        if pos.all() or not pos.any():
            continue
        per_class[k] = binary_auc(scores[:, k], pos)
    valid = ~np.isnan(per_class)
    if not valid.any():
        raise ValueError("no class has both positives and negatives")
    return float(per_class[valid].mean()), per_class


@dataclass
class MetricsReport:
    accuracy: float
    micro_sensitivity: float
    micro_specificity: float
    f1_weighted: float
    f1_macro: float
    roc_auc_macro_ovr: float
    precision: List[float]
    recall: List[float]
    support: List[int]
    per_class_auc: List[float] = field(default_factory=list)

    def table_row(self) -> Dict[str, float]:
        """The five table columns; F1 is the support-weighted variant."""
        return {
            "accuracy": self.accuracy,
            "sensitivity": self.micro_sensitivity,
            "specificity": self.micro_specificity,
            "f1": self.f1_weighted,
            "roc_auc": self.roc_auc_macro_ovr,
        }

    def flat(self) -> Dict[str, float]:
        row = dict(self.table_row())
        row["f1_macro"] = self.f1_macro
        for k, (p, r, s) in enumerate(zip(self.precision, self.recall, self.support)):
            row[f"precision_{k}"] = p
            row[f"recall_{k}"] = r
            row[f"support_{k}"] = s
        for k, a in enumerate(self.per_class_auc):
            row[f"auc_{k}"] = a
        return row

    @classmethod
    def from_flat(cls, row: Dict[str, str]) -> "MetricsReport":
        def series(prefix, cast=float):
            out = []
            k = 0
            while f"{prefix}_{k}" in row:
                out.append(cast(float(row[f"{prefix}_{k}"])))
                k += 1
            return out

        return cls(
            accuracy=float(row["accuracy"]),
            micro_sensitivity=float(row["sensitivity"]),
            micro_specificity=float(row["specificity"]),
            f1_weighted=float(row["f1"]),
            f1_macro=float(row["f1_macro"]),
            roc_auc_macro_ovr=float(row["roc_auc"]),
            precision=series("precision"),
            recall=series("recall"),
            support=series("support", int),
            per_class_auc=series("auc"),
        )


def build_report(cm: ConfusionMatrix, scores, labels) -> MetricsReport:
    labels = np.asarray(labels)
    if len(labels) != cm.total:
        raise ValueError(f"confusion matrix covers {cm.total} samples but {len(labels)} labels given")
    acc, sens, spec = basic_rates(cm)
    f1w, f1m, _ = f1_scores(cm)
    auc, per_auc = roc_auc_ovr(scores, labels, cm.num_classes)
    precision, recall, support = precision_recall(cm)
    return MetricsReport(
        accuracy=acc,
        micro_sensitivity=sens,
        micro_specificity=spec,
        f1_weighted=f1w,
        f1_macro=f1m,
        roc_auc_macro_ovr=auc,
        precision=precision.tolist(),
        recall=recall.tolist(),
        support=[int(s) for s in support],
        per_class_auc=per_auc.tolist(),
    )


def evaluate_scores(scores, labels, num_classes: Optional[int] = None) -> MetricsReport:
    """Argmax predictions from ``scores``, then the full report."""
    scores = np.asarray(scores)
    c = num_classes or scores.shape[1]
    cm = confusion_matrix(scores.argmax(axis=1), labels, c)
    return build_report(cm, scores, labels)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def rows_to_csv(rows: List[Dict[str, object]], columns: Optional[List[str]] = None) -> str:
    if not rows:
        return ""
    columns = columns or list(rows[0].keys())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([v if isinstance(v, str) else _fmt(v) for v in (row.get(c, "") for c in columns)])
    return buf.getvalue()


def csv_to_rows(text: str) -> List[Dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))


def markdown_table(rows: List[Dict[str, object]], columns: List[str], percent: bool = True, digits: int = 2) -> str:
    """Pipe table; float cells shown as percentages by default."""

    def cell(v):
        if isinstance(v, str):
            return v
        if isinstance(v, (float, np.floating)):
            if np.isnan(v):
                return "n/a"
            return f"{100 * v:.{digits}f}" if percent else f"{v:.{digits}f}"
        return str(v)

    lines = ["| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(cell(row.get(c, "")) for c in columns) + " |")
    return "\n".join(lines) + "\n"
