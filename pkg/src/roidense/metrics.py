"""Classifier and segmentation evaluation metrics.

Two distinct overlap scores are exposed on purpose. ``iou`` is intersection
over union, symmetric in its arguments. ``map_segmentation`` averages
intersection over *truth area* across cases (how much of each true lesion the
model recovered); it is not symmetric, and a witness test pins that
difference down. Reports emit as CSV through ``metrics_to_csv`` and
``roc_to_csv``.
"""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, ShapeError, UndefinedMetricError

METRIC_NAMES = ("acc", "sen", "spe", "precision", "f1")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise DomainError(f"confusion counts must be >= 0: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class SegEvalCase:
    """Model mask vs. the true lesion mask for one image."""
    model_mask: np.ndarray
    truth_mask: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.model_mask, dtype=bool)
        b = np.asarray(self.truth_mask, dtype=bool)
        if a.shape != b.shape:
            raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
        object.__setattr__(self, "model_mask", a)
        object.__setattr__(self, "truth_mask", b)


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DomainError(f"label must be 0 or 1, got {self.label}")


def confusion_metrics(c: ConfusionCounts) -> dict[str, float]:
    """Accuracy, sensitivity, specificity, precision and F1 from raw counts."""
    if c.total == 0:
        raise UndefinedMetricError("acc", "no samples")
    out = {"acc": (c.tp + c.tn) / c.total}
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("sen", "no actual positives (tp + fn = 0)")
    out["sen"] = c.tp / (c.tp + c.fn)
    if c.tn + c.fp == 0:
        raise UndefinedMetricError("spe", "no actual negatives (tn + fp = 0)")
    out["spe"] = c.tn / (c.tn + c.fp)
    if c.tp + c.fp == 0:
        raise UndefinedMetricError("precision", "no predicted positives "
                                   "(tp + fp = 0)")
    out["precision"] = c.tp / (c.tp + c.fp)
    if out["precision"] + out["sen"] == 0:
        raise UndefinedMetricError("f1", "precision + sensitivity = 0")
    out["f1"] = 2 * out["precision"] * out["sen"] / (out["precision"] + out["sen"])
    return out


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Pixel-count intersection over union of two binary masks."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        raise UndefinedMetricError("iou", "both masks empty")
    return int(np.logical_and(a, b).sum()) / union


def map_segmentation(cases: Sequence[SegEvalCase]) -> float:
    """Mean over cases of |model AND truth| / |truth|."""
    if not cases:
        raise DomainError("map_segmentation needs at least one case")
    ratios = []
    for i, case in enumerate(cases):
        truth = int(case.truth_mask.sum())
        if truth == 0:
            raise DomainError(f"case {i} has an empty truth mask")
        overlap = int(np.logical_and(case.model_mask, case.truth_mask).sum())
        ratios.append(overlap / truth)
    return float(np.mean(ratios))


def _ordered(samples: Sequence[ScoredSample]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray([s.score for s in samples], dtype=np.float64)
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    if labels.sum() == 0 or labels.sum() == labels.size:
        raise UndefinedMetricError("auc", "needs both a positive and a "
                                   "negative sample")
    order = np.argsort(-scores, kind="stable")
    return scores[order], labels[order]


def roc_points(samples: Sequence[ScoredSample]) -> list[tuple[float, float]]:
    """(fpr, tpr) sweep from (0, 0) to (1, 1), one step per distinct score."""
    scores, labels = _ordered(samples)
    pos = int(labels.sum())
    neg = labels.size - pos
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < labels.size:
        j = i
        while j < labels.size and scores[j] == scores[i]:
            tp += int(labels[j])
            fp += 1 - int(labels[j])
            j += 1
        points.append((fp / neg, tp / pos))
        i = j
    return points


def auc_roc(samples: Sequence[ScoredSample]) -> float:
    """Trapezoidal area under the ROC sweep.

    Grouping tied scores into single sweep steps makes this equal to the
    Mann-Whitney statistic P(s_pos > s_neg) + 0.5 P(s_pos = s_neg).
    """
    pts = roc_points(samples)
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        area += (x1 - x0) * 0.5 * (y0 + y1)
    return area


def metrics_to_csv(values: dict[str, float]) -> str:
    """One header row, one value row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    keys = list(values.keys())
    writer.writerow(keys)
    writer.writerow([repr(float(values[k])) for k in keys])
    return buf.getvalue()


def roc_to_csv(points: Sequence[tuple[float, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fpr", "tpr"])
    for fpr, tpr in points:
        writer.writerow([repr(float(fpr)), repr(float(tpr))])
    return buf.getvalue()
