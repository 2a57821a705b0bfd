"""Competition scoring: per-class F1, total accuracy and the task composites.

AU:          0.5 * macro F1 + 0.5 * total accuracy (over all N x 12 decisions)
expression:  0.67 * macro F1 + 0.33 * accuracy
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import NUM_EXPR
from .errors import ContractError

COMPOSITE_WEIGHTS = {"au": (0.5, 0.5), "expression": (0.67, 0.33)}


def threshold_au(probs, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) >= threshold).astype(np.int64)


def _f1_from_counts(tp, fp, fn, empty_score: float) -> np.ndarray:
    tp, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn))
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, 2 * tp / denom, empty_score)
    return f1


def binary_f1_per_class(preds, labels, empty_score: float = 1.0) -> np.ndarray:
    """F1 = 2TP / (2TP + FP + FN) per column.

    A column with no positives in either ``preds`` or ``labels`` scores
    ``empty_score`` (1.0 by default; pass 0.0 for the stricter convention).
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 2:
        raise ContractError(f"shape mismatch: {preds.shape} vs {labels.shape}")
    p = preds.astype(bool)
    t = labels.astype(bool)
    tp = (p & t).sum(axis=0)
    fp = (p & ~t).sum(axis=0)
    fn = (~p & t).sum(axis=0)
    return _f1_from_counts(tp, fp, fn, empty_score)


def total_accuracy_au(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"shape mismatch: {preds.shape} vs {labels.shape}")
    return float((preds == labels).mean()) if preds.size else 0.0


def exact_match_accuracy_au(preds, labels) -> float:
    """Fraction of frames whose whole 12-vector is right (alternative AU accuracy)."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"shape mismatch: {preds.shape} vs {labels.shape}")
    return float(np.all(preds == labels, axis=1).mean()) if preds.size else 0.0


def expr_f1_and_accuracy(preds, labels, empty_score: float = 1.0) -> tuple[np.ndarray, float]:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ContractError(f"shape mismatch: {preds.shape} vs {labels.shape}")
    if preds.size and (preds.min() < 0 or preds.max() >= NUM_EXPR
                       or labels.min() < 0 or labels.max() >= NUM_EXPR):
        raise ContractError(f"classes must lie in [0, {NUM_EXPR - 1}]")
    classes = np.arange(NUM_EXPR)
    p = preds[:, None] == classes
    t = labels[:, None] == classes
    tp = (p & t).sum(axis=0)
    fp = (p & ~t).sum(axis=0)
    fn = (~p & t).sum(axis=0)
    acc = float((preds == labels).mean()) if preds.size else 0.0
    return _f1_from_counts(tp, fp, fn, empty_score), acc


def composite_score(task: str, macro_f1: float, accuracy: float) -> float:
    try:
        w_f1, w_acc = COMPOSITE_WEIGHTS[task]
    except KeyError:
        raise ContractError(f"unknown task {task!r}") from None
    return w_f1 * macro_f1 + w_acc * accuracy


@dataclass
class MetricReport:
    task: str
    per_class_f1: list[float]
    macro_f1: float
    total_accuracy: float
    composite: float
    counts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def csv_header(self) -> list[str]:
        return ["task", "macro_f1", "total_accuracy", "composite",
                *[f"f1_{i}" for i in range(len(self.per_class_f1))]]

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(
            [self.task, f"{self.macro_f1:.6f}", f"{self.total_accuracy:.6f}", f"{self.composite:.6f}",
             *[f"{v:.6f}" for v in self.per_class_f1]])
        return buf.getvalue()


def au_report(preds, labels, empty_score: float = 1.0, **counts) -> MetricReport:
    f1 = binary_f1_per_class(preds, labels, empty_score)
    acc = total_accuracy_au(preds, labels)
    macro = float(f1.mean())
    counts = {"frames": int(np.asarray(labels).shape[0]),
              "exact_match_accuracy": exact_match_accuracy_au(preds, labels), **counts}
    return MetricReport("au", [float(v) for v in f1], macro, acc, composite_score("au", macro, acc), counts)


def expr_report(preds, labels, empty_score: float = 1.0, **counts) -> MetricReport:
    f1, acc = expr_f1_and_accuracy(preds, labels, empty_score)
    macro = float(f1.mean())
    counts = {"frames": int(np.asarray(labels).shape[0]), **counts}
    return MetricReport("expression", [float(v) for v in f1], macro, acc,
                        composite_score("expression", macro, acc), counts)
