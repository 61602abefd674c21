"""Confusion-count metrics, PR curves and break-even points.

Counts are accumulated dataset-wide (micro-averaged). Accumulators are
plain integer sums, so shards merge by addition in any order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels

METRIC_NAMES = ("precision", "recall", "specificity", "dice", "iou", "g_mean")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass
class MetricReport:
    precision: float
    recall: float
    specificity: float
    dice: float
    iou: float
    g_mean: float
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["counts"] = ConfusionCounts(**d.get("counts", {}))
        return cls(**{k: d[k] for k in (*METRIC_NAMES, "counts")})


def accumulate(pred, gt, counts: ConfusionCounts | None = None) -> ConfusionCounts:
    """Add the per-pixel confusion of one binary prediction to ``counts``."""
    tp, fp, tn, fn = _kernels.confusion_counts(pred, gt)
    return (counts or ConfusionCounts()) + ConfusionCounts(tp, fp, tn, fn)


def _ratio(num: int, den: int) -> float:
    # zero denominator: nothing to get wrong, count as perfect
    if den == 0:
        return 1.0 if num == 0 else 0.0
    return num / den


def compute_metrics(counts: ConfusionCounts) -> MetricReport:
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    recall = _ratio(tp, tp + fn)
    specificity = _ratio(tn, tn + fp)
    return MetricReport(
        precision=_ratio(tp, tp + fp),
        recall=recall,
        specificity=specificity,
        dice=_ratio(2 * tp, 2 * tp + fp + fn),
        iou=_ratio(tp, tp + fp + fn),
        g_mean=math.sqrt(recall * specificity),
        counts=ConfusionCounts(tp, fp, tn, fn),
    )


def dice_from_iou(iou: float) -> float:
    return 2.0 * iou / (1.0 + iou)


# --------------------------------------------------------------- PR curves


def default_thresholds(n: int) -> np.ndarray:
    """``n`` thresholds spaced uniformly inside (0, 1): ``k / (n + 1)``."""
    if n < 1:
        raise ValueError("need at least one threshold")
    return np.arange(1, n + 1, dtype=np.float64) / (n + 1)


class PRAccumulator:
    """Mergeable per-threshold histogram of positive/negative pixels."""

    def __init__(self, thresholds: np.ndarray):
        self.thresholds = np.asarray(thresholds, dtype=np.float64)
        if np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        self.pos = np.zeros(len(self.thresholds) + 1, dtype=np.int64)
        self.neg = np.zeros(len(self.thresholds) + 1, dtype=np.int64)

    def add(self, probs, gt) -> "PRAccumulator":
        pos, neg = _kernels.threshold_histogram(probs, gt, self.thresholds)
        self.pos += pos
        self.neg += neg
        return self

    def merge(self, other: "PRAccumulator") -> "PRAccumulator":
        if not np.array_equal(self.thresholds, other.thresholds):
            raise ValueError("cannot merge accumulators with different thresholds")
        self.pos += other.pos
        self.neg += other.neg
        return self

    def counts_at(self) -> list[ConfusionCounts]:
        # pixels in bin k are predicted positive for thresholds t_1..t_k
        tp = np.cumsum(self.pos[::-1])[::-1][1:]
        fp = np.cumsum(self.neg[::-1])[::-1][1:]
        n_pos, n_neg = int(self.pos.sum()), int(self.neg.sum())
        return [ConfusionCounts(int(a), int(b), n_neg - int(b), n_pos - int(a)) for a, b in zip(tp, fp)]

    def curve(self) -> "PRCurve":
        if self.pos.sum() + self.neg.sum() == 0:
            raise ValueError("PR curve over an empty set")
        pts = []
        for t, c in zip(self.thresholds, self.counts_at()):
            pts.append((float(t), _ratio(c.tp, c.tp + c.fp), _ratio(c.tp, c.tp + c.fn)))
        return PRCurve(pts, break_even_point(pts))


@dataclass
class PRCurve:
    points: list  # [(threshold, precision, recall)], threshold ascending
    break_even: tuple  # (threshold, value)

    def to_csv(self, path, include_bep: bool = True):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall", "kind"])
            for t, p, r in self.points:
                w.writerow([repr(t), repr(p), repr(r), "point"])
            if include_bep:
                t, v = self.break_even
                w.writerow([repr(t), repr(v), repr(v), "bep"])


def break_even_point(points) -> tuple:
    """Threshold and value where precision meets recall.

    Linear interpolation across the first sign change of ``P - R``; without
    one, the point with the smallest ``|P - R|`` (value = their mean).
    """
    d = [p - r for _, p, r in points]
    for i in range(len(points) - 1):
        if d[i] == 0.0:
            return points[i][0], points[i][1]
        if d[i] * d[i + 1] < 0:
            a = d[i] / (d[i] - d[i + 1])
            t0, p0, _ = points[i]
            t1, p1, _ = points[i + 1]
            return t0 + a * (t1 - t0), p0 + a * (p1 - p0)
    j = int(np.argmin(np.abs(d)))
    t, p, r = points[j]
    return t, 0.5 * (p + r)


def pr_curve(probs, gts, n_thresholds: int = 99) -> PRCurve:
    """PR curve over aligned probability maps and binary masks."""
    probs, gts = list(probs), list(gts)
    if not probs or len(probs) != len(gts):
        raise ValueError("pr_curve needs a non-empty, aligned set of maps")
    acc = PRAccumulator(default_thresholds(n_thresholds))
    for p, g in zip(probs, gts):
        acc.add(p, g)
    return acc.curve()
