"""Confusion matrices, per-class accuracy, macro error rates, and reports.

Rate definitions used throughout (documented in every report header): for
each class treated one-vs-rest, TP rate = TP/(TP+FN), TN rate = TN/(TN+FP),
FP rate = FP/(FP+TN), FN rate = FN/(FN+TP), all as percentages, then
macro-averaged over classes.  Per class, TP+FN = 100 and TN+FP = 100 by
construction.  Classes with no true samples contribute accuracy 0 and are
skipped in the macro averages.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

RATE_DEFINITION = (
    "macro-averaged one-vs-rest percentage rates: TP=TP/(TP+FN), TN=TN/(TN+FP), "
    "FP=FP/(FP+TN), FN=FN/(FN+TP), averaged over classes with support"
)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed [true class, predicted class]."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise UsageError(f"confusion matrix must be square, got {counts.shape}")
        if counts.size and counts.min() < 0:
            raise UsageError("confusion matrix entries must be nonnegative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def to_text_grid(self) -> str:
        width = max(5, len(str(self.counts.max())) if self.total else 1)
        lines = ["true\\pred " + " ".join(f"{c:>{width}}" for c in range(self.num_classes))]
        for t in range(self.num_classes):
            lines.append(f"{t:>9} " + " ".join(f"{v:>{width}}" for v in self.counts[t]))
        return "\n".join(lines) + "\n"


def confusion(labels, predictions, num_classes: int) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise UsageError("labels and predictions must have equal length")
    if labels.size and (
        labels.min() < 0 or labels.max() >= num_classes
        or predictions.min() < 0 or predictions.max() >= num_classes
    ):
        raise UsageError(f"class indices outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return ConfusionMatrix(counts)


def per_class_accuracy(cm: ConfusionMatrix) -> np.ndarray:
    """Diagonal over row sums; empty classes score 0 by convention."""
    row = cm.counts.sum(axis=1)
    diag = np.diag(cm.counts)
    return np.where(row > 0, diag / np.maximum(row, 1), 0.0)


def macro_rates(cm: ConfusionMatrix) -> dict[str, float]:
    """One-vs-rest TP/TN/FP/FN percentage rates, macro-averaged over classes."""
    counts = cm.counts
    total = cm.total
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    tp = np.diag(counts)
    fn = row - tp
    fp = col - tp
    tn = total - tp - fn - fp
    pos_support = row > 0
    neg_support = (tn + fp) > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        tp_rate = np.where(pos_support, tp / np.maximum(tp + fn, 1) * 100.0, np.nan)
        fn_rate = np.where(pos_support, fn / np.maximum(tp + fn, 1) * 100.0, np.nan)
        tn_rate = np.where(neg_support, tn / np.maximum(tn + fp, 1) * 100.0, np.nan)
        fp_rate = np.where(neg_support, fp / np.maximum(tn + fp, 1) * 100.0, np.nan)
    return {
        "TP": float(np.nanmean(tp_rate)) if pos_support.any() else 0.0,
        "TN": float(np.nanmean(tn_rate)) if neg_support.any() else 0.0,
        "FP": float(np.nanmean(fp_rate)) if neg_support.any() else 0.0,
        "FN": float(np.nanmean(fn_rate)) if pos_support.any() else 0.0,
    }


@dataclass
class EvalReport:
    """Evaluation summary for one branch or fusion model."""

    identifier: str
    accuracy: float
    per_class: np.ndarray
    confusion: ConfusionMatrix
    rates: dict[str, float]
    wall_time: float = 0.0
    param_count: int = 0

    def to_json_obj(self) -> dict:
        return {
            "identifier": self.identifier,
            "rate_definition": RATE_DEFINITION,
            "accuracy": self.accuracy,
            "per_class_accuracy": [float(v) for v in self.per_class],
            "confusion": self.confusion.counts.tolist(),
            "rates": self.rates,
            "wall_time": self.wall_time,
            "param_count": self.param_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True, indent=2) + "\n"

    @staticmethod
    def csv_header() -> str:
        return "identifier,accuracy,tp,tn,fp,fn,params,wall_time"

    def to_csv_row(self) -> str:
        r = self.rates
        return (
            f"{self.identifier},{self.accuracy:.6f},{r['TP']:.4f},{r['TN']:.4f},"
            f"{r['FP']:.4f},{r['FN']:.4f},{self.param_count},{self.wall_time:.3f}"
        )

    @classmethod
    def from_json_obj(cls, obj: dict) -> "EvalReport":
        return cls(
            identifier=obj["identifier"],
            accuracy=obj["accuracy"],
            per_class=np.asarray(obj["per_class_accuracy"], dtype=np.float64),
            confusion=ConfusionMatrix(np.asarray(obj["confusion"])),
            rates={k: float(v) for k, v in obj["rates"].items()},
            wall_time=obj.get("wall_time", 0.0),
            param_count=obj.get("param_count", 0),
        )


def evaluate_scores(identifier: str, labels, scores: np.ndarray, num_classes: int, *,
                    wall_time: float = 0.0, param_count: int = 0) -> EvalReport:
    """Build an EvalReport from per-sample class scores."""
    predictions = np.asarray(scores).argmax(axis=1)
    cm = confusion(labels, predictions, num_classes)
    return EvalReport(
        identifier=identifier,
        accuracy=cm.accuracy(),
        per_class=per_class_accuracy(cm),
        confusion=cm,
        rates=macro_rates(cm),
        wall_time=wall_time,
        param_count=param_count,
    )


@dataclass(frozen=True)
class ClassDelta:
    class_index: int
    best_space: str
    best: float
    worst_space: str
    worst: float

    @property
    def spread(self) -> float:
        return self.best - self.worst


def cross_space_class_deltas(reports: Sequence[EvalReport]) -> list[ClassDelta]:
    """Per class: best and worst space by per-class accuracy, sorted by spread.

    Ties in spread are broken by ascending class index; ties among spaces by
    report order.
    """
    if not reports:
        return []
    n_classes = {len(r.per_class) for r in reports}
    if len(n_classes) != 1:
        raise UsageError("reports disagree on class count")
    deltas = []
    for c in range(n_classes.pop()):
        values = [(float(r.per_class[c]), r.identifier) for r in reports]
        best = max(values, key=lambda v: v[0])
        worst = min(values, key=lambda v: v[0])
        deltas.append(ClassDelta(c, best[1], best[0], worst[1], worst[0]))
    return sorted(deltas, key=lambda d: (-d.spread, d.class_index))


def branch_disagreement(predictions: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise fraction of samples on which two branches predict differently."""
    preds = [np.asarray(p, dtype=np.int64) for p in predictions]
    if len({p.shape for p in preds}) > 1:
        raise UsageError("prediction vectors must have equal length")
    m = len(preds)
    out = np.zeros((m, m), dtype=np.float64)
    for i in range(m):
        for j in range(i + 1, m):
            frac = float(np.mean(preds[i] != preds[j])) if preds[i].size else 0.0
            out[i, j] = out[j, i] = frac
    return out
