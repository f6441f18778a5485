"""Pixel-level anomaly-segmentation metrics.

Conventions, fixed here and echoed in every report:

* A pixel is predicted positive at threshold ``t`` when its score is
  strictly greater than ``t`` (the same rule the detector applies).
* Counts are pooled over the whole evaluation set (micro-averaging) before
  any curve or ratio is derived.
* Average precision uses step integration over descending thresholds:
  ``AP = sum_i (R_i - R_{i-1}) * P_i`` with ``R_0 = 0``; points with no
  predictions are skipped because precision is undefined there.
* FPR@TPR takes the minimum false-positive rate among points whose recall
  reaches the target; if the target is unreachable it falls back to the
  best achieved recall and says so.
* The default threshold grid is the union of 512 uniform points in [0, 1]
  and, up to ``UNIQUE_SCORE_LIMIT`` pixels, every unique score value, which
  makes the curve exact at test scale while staying bounded on real data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyGroundTruthError, ShapeMismatchError

UNIFORM_GRID_POINTS = 512
UNIQUE_SCORE_LIMIT = 100_000

ScoredImage = tuple[np.ndarray, np.ndarray, np.ndarray | None]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(
    pred: np.ndarray, gt: np.ndarray, ignore: np.ndarray | None = None
) -> ConfusionCounts:
    """Exact integer confusion counts; ignored pixels are excluded entirely."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} does not match ground truth {gt.shape}")
    if ignore is not None:
        ignore = np.asarray(ignore, dtype=bool)
        if ignore.shape != gt.shape:
            raise ShapeMismatchError(f"ignore mask {ignore.shape} does not match ground truth {gt.shape}")
        valid = ~ignore
        pred = pred[valid]
        gt = gt[valid]
    return ConfusionCounts(
        tp=int((pred & gt).sum()),
        fp=int((pred & ~gt).sum()),
        fn=int((~pred & gt).sum()),
        tn=int((~pred & ~gt).sum()),
    )


@dataclass(eq=False)
class ThresholdCurve:
    """Pooled counts per threshold; thresholds are stored in descending order."""

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    def __post_init__(self) -> None:
        order = np.argsort(-self.thresholds, kind="stable")
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)[order]
        for name in ("tp", "fp", "fn", "tn"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64)[order])

    @property
    def positives(self) -> int:
        return int(self.tp[0] + self.fn[0]) if len(self.tp) else 0

    @property
    def negatives(self) -> int:
        return int(self.fp[0] + self.tn[0]) if len(self.fp) else 0

    @property
    def precision(self) -> np.ndarray:
        denom = self.tp + self.fp
        return np.divide(self.tp, denom, out=np.full(len(denom), np.nan), where=denom > 0)

    @property
    def recall(self) -> np.ndarray:
        pos = self.positives
        return self.tp / pos if pos else np.zeros(len(self.tp))

    @property
    def fpr(self) -> np.ndarray:
        neg = self.negatives
        return self.fp / neg if neg else np.zeros(len(self.fp))


def default_threshold_grid(scores: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
    """512 uniform points in [0, 1], plus all unique scores at test scale."""
    arrays = [np.asarray(s).ravel() for s in (scores if isinstance(scores, (list, tuple)) else [scores])]
    grid = np.linspace(0.0, 1.0, UNIFORM_GRID_POINTS)
    if sum(a.size for a in arrays) <= UNIQUE_SCORE_LIMIT:
        grid = np.union1d(grid, np.concatenate(arrays) if arrays else [])
    return grid[::-1].copy()


def _strictly_above_counts(sorted_values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Number of values strictly greater than each threshold (values sorted ascending)."""
    return sorted_values.size - np.searchsorted(sorted_values, thresholds, side="right")


def pr_curve(
    scores: np.ndarray | Sequence[np.ndarray],
    gt: np.ndarray | Sequence[np.ndarray],
    thresholds: np.ndarray | None = None,
    ignore: np.ndarray | Sequence[np.ndarray | None] | None = None,
) -> ThresholdCurve:
    """Threshold curve of pooled confusion counts for score > threshold.

    Accepts a single image or parallel sequences of images; counts are
    summed across images. Raises EmptyGroundTruthError when the pooled set
    has no positive pixel, since ranking metrics are undefined there.
    """
    single = not isinstance(scores, (list, tuple))
    score_list = [np.asarray(scores)] if single else [np.asarray(s) for s in scores]
    gt_list = [np.asarray(gt)] if single else [np.asarray(g) for g in gt]
    if ignore is None:
        ignore_list: list[np.ndarray | None] = [None] * len(score_list)
    else:
        ignore_list = [ignore] if single else list(ignore)  # type: ignore[list-item]
    if len(score_list) != len(gt_list) or len(score_list) != len(ignore_list):
        raise ShapeMismatchError("scores, ground truth and ignore lists differ in length")

    if thresholds is None:
        thresholds = default_threshold_grid(score_list)
    thresholds = np.asarray(thresholds, dtype=np.float64)

    tp = np.zeros(len(thresholds), dtype=np.int64)
    fp = np.zeros(len(thresholds), dtype=np.int64)
    positives = 0
    negatives = 0
    for s, g, ig in zip(score_list, gt_list, ignore_list):
        s = np.asarray(s, dtype=np.float64).ravel()
        g = np.asarray(g, dtype=bool).ravel()
        if s.shape != g.shape:
            raise ShapeMismatchError("score map and ground truth differ in shape")
        if ig is not None:
            valid = ~np.asarray(ig, dtype=bool).ravel()
            s, g = s[valid], g[valid]
        pos_scores = np.sort(s[g])
        neg_scores = np.sort(s[~g])
        positives += pos_scores.size
        negatives += neg_scores.size
        tp += _strictly_above_counts(pos_scores, thresholds)
        fp += _strictly_above_counts(neg_scores, thresholds)
    if positives == 0:
        raise EmptyGroundTruthError("no positive ground-truth pixels in the evaluation set")
    return ThresholdCurve(thresholds=thresholds, tp=tp, fp=fp, fn=positives - tp, tn=negatives - fp)


def aupr(curve: ThresholdCurve) -> float:
    """Step-integrated average precision over descending thresholds."""
    positives = curve.positives
    if positives == 0:
        raise EmptyGroundTruthError("average precision is undefined without positive pixels")
    area = 0.0
    prev_recall = 0.0
    for tp, fp in zip(curve.tp, curve.fp):
        predicted = int(tp) + int(fp)
        if predicted == 0:
            continue
        recall = int(tp) / positives
        area += (recall - prev_recall) * (int(tp) / predicted)
        prev_recall = recall
    return area


@dataclass(frozen=True)
class FprResult:
    fpr: float
    achieved_tpr: float
    used_fallback: bool


def fpr_at_tpr(curve: ThresholdCurve, target: float = 0.95) -> FprResult:
    """Minimum FPR among points reaching the target recall, else best-recall fallback."""
    if len(curve.thresholds) == 0:
        raise EmptyGroundTruthError("cannot evaluate an empty curve")
    tpr = curve.recall
    fpr = curve.fpr
    reached = tpr >= target
    if reached.any():
        candidates = np.flatnonzero(reached)
        best = candidates[np.lexsort((-tpr[candidates], fpr[candidates]))[0]]
        return FprResult(fpr=float(fpr[best]), achieved_tpr=float(tpr[best]), used_fallback=False)
    best_tpr = tpr.max()
    at_best = np.flatnonzero(tpr == best_tpr)
    return FprResult(
        fpr=float(fpr[at_best].min()), achieved_tpr=float(best_tpr), used_fallback=True
    )


def _overlap_ratios(counts: ConfusionCounts) -> tuple[float, float]:
    if counts.tp == 0 and counts.fp == 0 and counts.fn == 0:
        return 1.0, 1.0  # both masks empty
    iou = counts.tp / (counts.tp + counts.fp + counts.fn)
    f1 = 2 * counts.tp / (2 * counts.tp + counts.fp + counts.fn)
    return iou, f1


def binary_iou(pred: np.ndarray, gt: np.ndarray, ignore: np.ndarray | None = None) -> float:
    """Intersection over union of the positive class; 1.0 when both masks are empty."""
    return _overlap_ratios(confusion_counts(pred, gt, ignore))[0]


def f1(pred: np.ndarray, gt: np.ndarray, ignore: np.ndarray | None = None) -> float:
    """Dice / F1 of the positive class; equals 2*IoU/(1+IoU) for any prediction."""
    return _overlap_ratios(confusion_counts(pred, gt, ignore))[1]


def iou_f1_from_counts(counts: ConfusionCounts) -> tuple[float, float]:
    return _overlap_ratios(counts)


def curve_rows(curve: ThresholdCurve) -> Iterable[tuple]:
    """Rows for CSV export: threshold, counts, precision, recall, fpr."""
    precision = curve.precision
    recall = curve.recall
    fpr = curve.fpr
    for i, t in enumerate(curve.thresholds):
        yield (
            float(t),
            int(curve.tp[i]),
            int(curve.fp[i]),
            int(curve.fn[i]),
            int(curve.tn[i]),
            None if np.isnan(precision[i]) else float(precision[i]),
            float(recall[i]),
            float(fpr[i]),
        )
