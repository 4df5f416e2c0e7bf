"""Threshold-free evaluation metrics for open set recognition.

AUROC follows the pairwise definition (probability that a random inlier
outscores a random outlier, ties counted half) and is computed with rank
statistics, which matches the exhaustive pairwise count exactly. OSCR sweeps
a shared score threshold over the correct classification rate of inliers and
the false positive rate of outliers and integrates the resulting curve.
All scores are expected in higher-is-inlier orientation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "CurvePoint",
    "EvaluationRecord",
    "accuracy",
    "auroc",
    "openness",
    "oscr",
    "roc_points",
    "write_curve_csv",
    "write_metrics_csv",
]


@dataclass(frozen=True)
class EvaluationRecord:
    """Per-sample evaluation input.

    Outlier records carry no true inlier label; inlier records need both a
    true and a predicted label for OSCR.
    """

    score: float
    outlier: bool
    true_label: int | None = None
    predicted_label: int | None = None


@dataclass(frozen=True)
class CurvePoint:
    """One swept threshold: (CCR, FPR) for OSCR curves, (TPR, FPR) for ROC."""

    threshold: float
    ccr: float
    fpr: float


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(inlier_scores, outlier_scores) -> float:
    """Area under the ROC curve with inliers as the positive class.

    Equals P(score_in > score_out) + 0.5 * P(score_in = score_out) over all
    inlier/outlier pairs. Rank sums and pairwise counts are both half-integer
    valued, so the rank route reproduces the pairwise count exactly.
    """
    pos = np.asarray(inlier_scores, dtype=np.float64).ravel()
    neg = np.asarray(outlier_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc needs at least one inlier and one outlier score")
    if not (np.isfinite(pos).all() and np.isfinite(neg).all()):
        raise ValueError("auroc scores must be finite")
    ranks = _midranks(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return u / (pos.size * neg.size)


def _split_records(
    records: Sequence[EvaluationRecord],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    inlier = [r for r in records if not r.outlier]
    outlier = [r for r in records if r.outlier]
    if not inlier or not outlier:
        raise ValueError("oscr needs at least one inlier and one outlier record")
    for r in inlier:
        if r.true_label is None or r.predicted_label is None:
            raise ValueError("inlier records need true and predicted labels")
    in_scores = np.array([r.score for r in inlier], dtype=np.float64)
    out_scores = np.array([r.score for r in outlier], dtype=np.float64)
    if not (np.isfinite(in_scores).all() and np.isfinite(out_scores).all()):
        raise ValueError("oscr scores must be finite")
    correct = np.array(
        [r.predicted_label == r.true_label for r in inlier], dtype=bool
    )
    return in_scores, correct, out_scores


def oscr(records: Sequence[EvaluationRecord]) -> tuple[float, list[CurvePoint]]:
    """Open set classification rate: area under the CCR vs FPR curve.

    CCR(t) is the fraction of inlier records correctly classified with score
    >= t; FPR(t) is the fraction of outlier records with score >= t. The
    threshold sweep visits every distinct score plus a sentinel above the
    maximum, which pins the curve at FPR = 0; the global minimum score pins
    it at FPR = 1. The area is the trapezoid over FPR in [0, 1].
    """
    in_scores, correct, out_scores = _split_records(records)
    thresholds = np.unique(np.concatenate([in_scores, out_scores]))[::-1]
    points = [CurvePoint(math.inf, 0.0, 0.0)]
    for t in thresholds:
        ccr = float(np.mean(correct & (in_scores >= t)))
        fpr = float(np.mean(out_scores >= t))
        points.append(CurvePoint(float(t), ccr, fpr))
    area = 0.0
    for a, b in zip(points[:-1], points[1:]):
        area += (b.fpr - a.fpr) * 0.5 * (a.ccr + b.ccr)
    return area, points


def roc_points(inlier_scores, outlier_scores) -> list[CurvePoint]:
    """ROC curve (TPR vs FPR) swept over the distinct scores, same boundary
    convention as :func:`oscr` (score >= threshold counts as inlier)."""
    pos = np.asarray(inlier_scores, dtype=np.float64).ravel()
    neg = np.asarray(outlier_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("roc_points needs nonempty score sets")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    points = [CurvePoint(math.inf, 0.0, 0.0)]
    for t in thresholds:
        points.append(
            CurvePoint(float(t), float(np.mean(pos >= t)), float(np.mean(neg >= t)))
        )
    return points


def openness(known_classes: int, unknown_classes: int) -> float:
    """Protocol novelty measure: 1 - sqrt(K / (K + U))."""
    if known_classes < 1:
        raise ValueError("openness needs at least one known class")
    if unknown_classes < 0:
        raise ValueError("unknown class count cannot be negative")
    return 1.0 - math.sqrt(known_classes / (known_classes + unknown_classes))


def accuracy(predictions, labels) -> float:
    """Exact-match fraction of predictions against labels."""
    pred = np.asarray(predictions).ravel()
    lab = np.asarray(labels).ravel()
    if pred.size != lab.size:
        raise ValueError("predictions and labels differ in length")
    if pred.size == 0:
        raise ValueError("accuracy of an empty input is undefined")
    return float(np.mean(pred == lab))


def write_curve_csv(path, points: Iterable[CurvePoint], rate_name: str = "ccr") -> None:
    """Write curve points as (threshold, <rate_name>, fpr) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", rate_name, "fpr"])
        for p in points:
            writer.writerow([_fmt(p.threshold), _fmt(p.ccr), _fmt(p.fpr)])


def write_metrics_csv(path, values: dict[str, float]) -> None:
    """Write a one-row metric summary with sorted columns."""
    keys = sorted(values)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        writer.writerow([_fmt(values[k]) for k in keys])


def _fmt(x: float) -> str:
    if x == math.inf:
        return "inf"
    if x == -math.inf:
        return "-inf"
    return format(x, ".17g")
