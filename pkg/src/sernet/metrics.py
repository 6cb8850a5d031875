"""Confusion matrices and UA / WA / macro-F1.

Conventions:

* rows are true classes, columns predicted classes;
* UA averages recall over classes that have at least one true sample;
* macro-F1 averages per-class F1 over all classes, with 0/0 precision,
  recall or F1 read as 0.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import EmptyInputError


@dataclasses.dataclass
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def tolist(self):
        return self.counts.tolist()


def confusion(preds, targets, num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if preds.shape != targets.shape:
        raise ValueError("preds and targets differ in length")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (targets, preds), 1)
    return ConfusionMatrix(counts)


@dataclasses.dataclass
class MetricsReport:
    ua: float
    wa: float
    f1: float
    per_class_recall: list
    per_class_precision: list
    per_class_f1: list
    confusion: list

    def to_dict(self) -> dict:
        return {
            "ua": self.ua,
            "wa": self.wa,
            "f1_macro": self.f1,
            "confusion": self.confusion,
            "per_class": {
                "recall": self.per_class_recall,
                "precision": self.per_class_precision,
                "f1": self.per_class_f1,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        pc = d["per_class"]
        return cls(d["ua"], d["wa"], d["f1_macro"], pc["recall"], pc["precision"], pc["f1"], d["confusion"])


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    if cm.total == 0:
        raise EmptyInputError("confusion matrix is empty")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    support = c.sum(axis=1)
    predicted = c.sum(axis=0)
    recall = _ratio(tp, support)
    precision = _ratio(tp, predicted)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return MetricsReport(
        ua=float(recall[support > 0].mean()),
        wa=float(tp.sum() / c.sum()),
        f1=float(f1.mean()),
        per_class_recall=recall.tolist(),
        per_class_precision=precision.tolist(),
        per_class_f1=f1.tolist(),
        confusion=cm.tolist(),
    )


def evaluate(preds, targets, num_classes: int) -> MetricsReport:
    return metrics(confusion(preds, targets, num_classes))
