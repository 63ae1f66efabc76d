"""Confusion-matrix segmentation metrics: pixel accuracy, mean IoU, frequency-weighted IoU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .indices import IGNORE

METRIC_COLUMNS = ("PA", "mIoU", "FW-IoU")


@dataclass
class ConfusionMatrix:
    """``counts[i, j]`` = pixels of true class i predicted as class j."""

    n_classes: int = 2
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.n_classes, self.n_classes):
                raise ValueError(f"counts must be {self.n_classes}x{self.n_classes}")
            if np.any(self.counts < 0):
                raise ValueError("confusion counts must be non-negative")

    @property
    def totals(self) -> np.ndarray:
        """t_i: pixels whose true class is i."""
        return self.counts.sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred, truth) -> ConfusionMatrix:
    """Return ``cm`` plus the counts of one (pred, truth) pair; IGNORE truth pixels are skipped."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"prediction and truth differ in size: {pred.size} vs {truth.size}")
    keep = truth != IGNORE
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= cm.n_classes or p.min() < 0 or p.max() >= cm.n_classes):
        raise ValueError("labels outside the class range")
    add = np.bincount(t * cm.n_classes + p, minlength=cm.n_classes**2).reshape(cm.n_classes, cm.n_classes)
    return ConfusionMatrix(cm.n_classes, cm.counts + add)


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.counts.sum()
    return float(np.trace(cm.counts) / total) if total else float("nan")


def _iou_terms(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    diag = np.diag(cm.counts).astype(np.float64)
    union = cm.totals + cm.counts.sum(axis=0) - diag
    return diag, union.astype(np.float64)


def mean_iou(cm: ConfusionMatrix) -> float:
    """Mean of per-class IoU over classes whose union is non-empty."""
    diag, union = _iou_terms(cm)
    present = union > 0
    if not present.any():
        return float("nan")
    return float(np.mean(diag[present] / union[present]))


def fw_iou(cm: ConfusionMatrix) -> float:
    diag, union = _iou_terms(cm)
    t = cm.totals.astype(np.float64)
    present = union > 0
    if t.sum() == 0:
        return float("nan")
    return float((t[present] * diag[present] / union[present]).sum() / t.sum())


def report(cm: ConfusionMatrix) -> dict[str, float]:
    return {"PA": pixel_accuracy(cm), "mIoU": mean_iou(cm), "FW-IoU": fw_iou(cm)}
