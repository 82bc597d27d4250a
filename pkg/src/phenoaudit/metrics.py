"""Binary classification metrics and curve generation.

Threshold semantics: an encounter is predicted positive iff p is strictly
greater than the threshold, so ties at 0.5 fall to the negative side. The
same rule defines model-coder discordance downstream.

AUROC is the trapezoidal area under the tie-grouped ROC sweep (equivalently,
the probability a random positive outscores a random negative, counting ties
as half). Average precision is the step-wise sum over the same sweep, with no
interpolation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class PredictionRecord:
    encounter_id: str
    p: float
    coded: bool

    def __post_init__(self):
        if not (isinstance(self.p, float) and math.isfinite(self.p) and 0.0 <= self.p <= 1.0):
            raise ValidationError(f"probability must be finite in [0,1], got {self.p!r}")


@dataclass(frozen=True)
class CurvePoint:
    x: float
    y: float
    threshold: float


@dataclass(frozen=True)
class ConfusionResult:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    precision_defined: bool
    recall_defined: bool

    @property
    def counts(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def _split_scores(records: list[PredictionRecord]):
    pos = [r.p for r in records if r.coded]
    neg = [r.p for r in records if not r.coded]
    return pos, neg


def confusion_at_threshold(
    records: list[PredictionRecord], threshold: float = 0.5
) -> ConfusionResult:
    """Precision/recall/F1 with predicted positive iff p > threshold.

    Undefined ratios (zero denominator) are reported as 0.0 with the matching
    ``*_defined`` flag cleared.
    """
    pos, neg = _split_scores(records)
    if not pos:
        raise ValidationError("degenerate label set: no positive class present")
    if not neg:
        raise ValidationError("degenerate label set: no negative class present")
    tp = sum(1 for p in pos if p > threshold)
    fn = len(pos) - tp
    fp = sum(1 for p in neg if p > threshold)
    tn = len(neg) - fp
    precision_defined = (tp + fp) > 0
    precision = tp / (tp + fp) if precision_defined else 0.0
    recall = tp / (tp + fn)
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ConfusionResult(precision, recall, f1, tp, fp, tn, fn, precision_defined, True)


def _sweep(records: list[PredictionRecord]):
    """Yield (threshold, tp, fp) after each distinct-score group, descending."""
    ordered = sorted(records, key=lambda r: -r.p)
    tp = fp = 0
    i = 0
    n = len(ordered)
    while i < n:
        threshold = ordered[i].p
        while i < n and ordered[i].p == threshold:
            if ordered[i].coded:
                tp += 1
            else:
                fp += 1
            i += 1
        yield threshold, tp, fp


def roc_curve(records: list[PredictionRecord]) -> tuple[list[CurvePoint], float]:
    """Tie-grouped ROC sweep with trapezoidal AUROC.

    The returned points always include the (0,0) anchor (threshold +inf) and
    end at (1,1); one point is emitted per distinct score.
    """
    pos, neg = _split_scores(records)
    if not pos or not neg:
        raise ValidationError("ROC requires both classes present")
    n_pos, n_neg = len(pos), len(neg)
    points = [CurvePoint(0.0, 0.0, math.inf)]
    auroc = 0.0
    prev_fpr = prev_tpr = 0.0
    for threshold, tp, fp in _sweep(records):
        tpr = tp / n_pos
        fpr = fp / n_neg
        auroc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0
        points.append(CurvePoint(fpr, tpr, threshold))
        prev_fpr, prev_tpr = fpr, tpr
    return points, float(auroc)


def pr_curve(records: list[PredictionRecord]) -> tuple[list[CurvePoint], float]:
    """Precision-recall sweep with step-wise average precision.

    AP = sum over sweep points of (R_k - R_{k-1}) * P_k. Points are
    (recall, precision) with a (0,1) anchor at threshold +inf.
    """
    pos, _ = _split_scores(records)
    if not pos:
        raise ValidationError("PR curve requires at least one positive")
    n_pos = len(pos)
    points = [CurvePoint(0.0, 1.0, math.inf)]
    ap = 0.0
    prev_recall = 0.0
    for threshold, tp, fp in _sweep(records):
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        points.append(CurvePoint(recall, precision, threshold))
        prev_recall = recall
    return points, float(ap)


def _write_curve(path: Path, points: list[CurvePoint], x_name: str, y_name: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", x_name, y_name])
        for pt in points:
            writer.writerow([repr(pt.threshold), repr(pt.x), repr(pt.y)])


def export_curves(
    roc: tuple[list[CurvePoint], float],
    pr: tuple[list[CurvePoint], float],
    directory,
    confusion: ConfusionResult | None = None,
) -> list[str]:
    """Write roc.csv, pr.csv and summary.csv; returns the file names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    roc_points, auroc = roc
    pr_points, ap = pr
    _write_curve(directory / "roc.csv", roc_points, "fpr", "tpr")
    _write_curve(directory / "pr.csv", pr_points, "recall", "precision")
    with open(directory / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["auroc", repr(auroc)])
        writer.writerow(["average_precision", repr(ap)])
        if confusion is not None:
            writer.writerow(["precision", repr(confusion.precision)])
            writer.writerow(["recall", repr(confusion.recall)])
            writer.writerow(["f1", repr(confusion.f1)])
    return ["roc.csv", "pr.csv", "summary.csv"]


def records_from_arrays(ids, probs, labels) -> list[PredictionRecord]:
    probs = np.asarray(probs, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    return [
        PredictionRecord(str(i), float(p), bool(l))
        for i, p, l in zip(ids, probs, labels)
    ]
