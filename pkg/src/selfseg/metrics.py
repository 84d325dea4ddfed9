"""Confusion-matrix accumulation and per-class / mean intersection-over-union.

Counts are integer-exact; cell (i, j) is the number of pixels with ground
truth i predicted j.  Pixels whose ground truth is IGNORE are excluded;
predictions must not contain IGNORE.  A class with zero union is absent and
excluded from the mean (its per-class entry is None).

Matrices merge by addition, so shards accumulated in parallel and summed
equal a single sequential pass.
"""
from __future__ import annotations

import numpy as np

from .core import IGNORE
from .errors import InvalidInputError, UndefinedMetricError


class ConfusionMatrix:
    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        if num_classes < 2:
            raise InvalidInputError("num_classes must be >= 2")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = counts

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise InvalidInputError("cannot merge matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def valid_pixels(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    """Add one count per non-IGNORE ground-truth pixel; returns a new matrix."""
    if pred.shape != gt.shape:
        raise InvalidInputError(f"pred {pred.shape} and gt {gt.shape} shapes differ")
    if (pred == IGNORE).any():
        raise InvalidInputError("predictions must not contain IGNORE")
    k = cm.num_classes
    valid = gt != IGNORE
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    if p.size and (int(p.max()) >= k or int(g.max()) >= k):
        raise InvalidInputError(f"mask values exceed {k - 1}")
    counts = np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(k, cm.counts + counts)


def iou(cm: ConfusionMatrix) -> tuple[list[float | None], float]:
    """Per-class IoU (None where the class is absent) and the mean over present classes.

    IoU_c = tp / (tp + fp + fn); raises UndefinedMetricError if every class
    is absent.
    """
    tp = np.diag(cm.counts)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - tp
    per_class: list[float | None] = []
    present = []
    for c in range(cm.num_classes):
        if union[c] == 0:
            per_class.append(None)
        else:
            value = float(tp[c]) / float(union[c])
            per_class.append(value)
            present.append(value)
    if not present:
        raise UndefinedMetricError("no class has a nonzero union")
    return per_class, float(np.mean(present))


def masks_miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Convenience: global mIoU of a single prediction/ground-truth pair."""
    _, value = iou(accumulate(ConfusionMatrix(num_classes), pred, gt))
    return value
