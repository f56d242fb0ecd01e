"""Confusion-matrix segmentation metrics with the void class left out."""

from __future__ import annotations

import numpy as np

from .decoder import NUM_CLASSES, VOID


class ConfusionMatrix:
    """counts[truth, prediction] over scored pixels (truth != void)."""

    def __init__(self, num_classes: int = NUM_CLASSES, ignore: int | None = VOID):
        self.num_classes = num_classes
        self.ignore = ignore
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, truth, pred) -> "ConfusionMatrix":
        t = np.asarray(truth, dtype=np.int64).reshape(-1)
        p = np.asarray(pred, dtype=np.int64).reshape(-1)
        if t.shape != p.shape:
            raise ValueError(f"truth {np.shape(truth)} and prediction {np.shape(pred)} differ")
        keep = t != self.ignore if self.ignore is not None else np.ones_like(t, bool)
        t, p = t[keep], p[keep]
        if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= self.num_classes):
            raise ValueError("class index out of range")
        self.counts += np.bincount(t * self.num_classes + p,
                                   minlength=self.num_classes ** 2).reshape(self.num_classes, self.num_classes)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def valid_classes(self) -> list[int]:
        return [c for c in range(self.num_classes) if c != self.ignore]


def iou_per_class(cm: ConfusionMatrix, c: int) -> float:
    """TP / (TP + FP + FN); NaN when the class is absent from truth and prediction."""
    tp = cm.counts[c, c]
    fp = cm.counts[:, c].sum() - tp
    fn = cm.counts[c, :].sum() - tp
    den = tp + fp + fn
    return float(tp / den) if den else float("nan")


def ious(cm: ConfusionMatrix) -> dict[int, float]:
    return {c: iou_per_class(cm, c) for c in cm.valid_classes()}


def miou(cm: ConfusionMatrix) -> float:
    vals = [v for v in ious(cm).values() if not np.isnan(v)]
    if not vals:
        raise ValueError("no valid class to average")
    return float(np.mean(vals))
