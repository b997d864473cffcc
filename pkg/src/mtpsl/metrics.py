"""Evaluation metrics: mIoU, absolute error, mean angular error, and the
multi-task performance score (average signed per-task change vs single-task
baselines, sign-flipped for lower-is-better metrics).

All metrics are numpy-only accumulators so partial results from different
workers can be merged (confusion matrices and running sums are additive).
mIoU is dataset-level: confusion counts are accumulated over the whole
evaluation set before the per-class division.
"""

from __future__ import annotations

import numpy as np

from .errors import UndefinedMetricError
from .tasks import IGNORE_INDEX


class ConfusionMatrix:
    """Accumulates a num_classes x num_classes confusion matrix (rows = truth)."""

    def __init__(self, num_classes: int, ignore: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore = ignore
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, label) -> "ConfusionMatrix":
        """Add one prediction/label pair.

        ``pred`` is either class logits (num_classes, H, W), argmaxed here, or
        an integer class map broadcastable to ``label``.
        """
        pred = np.asarray(pred)
        label = np.asarray(label)
        if pred.ndim == 3 and pred.shape[0] == self.num_classes and self.num_classes > 1:
            pred = pred.argmax(axis=0)
        label = label.reshape(pred.shape)
        valid = label != self.ignore
        idx = self.num_classes * label[valid].astype(np.int64) + pred[valid].astype(np.int64)
        self.counts += np.bincount(idx, minlength=self.num_classes ** 2).reshape(
            self.num_classes, self.num_classes
        )
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    def miou(self) -> float:
        """Mean IoU over classes present in ground truth or predictions.

        Classes absent from both are excluded from the mean (avoids 0/0).
        """
        if self.counts.sum() == 0:
            raise UndefinedMetricError("no non-ignored pixels accumulated")
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        union = tp + fp + fn
        present = union > 0
        return float(np.mean(tp[present] / union[present]))


def miou(pred_logits, label_map, num_classes: int, ignore: int = IGNORE_INDEX) -> float:
    """Single-shot mean IoU; see :class:`ConfusionMatrix` for the accumulator."""
    return ConfusionMatrix(num_classes, ignore).update(pred_logits, label_map).miou()


def abs_err(pred, label) -> float:
    """Mean absolute error over all pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    return float(np.mean(np.abs(pred - label)))


def mean_angle_err(pred_normals, label_normals) -> float:
    """Mean angle in degrees between per-pixel unit direction fields.

    Both inputs are (3, H, W) unit-normalized per pixel; the dot product is
    clamped to [-1, 1] before arccos.
    """
    pred = np.asarray(pred_normals, dtype=np.float64)
    label = np.asarray(label_normals, dtype=np.float64)
    dots = np.clip(np.sum(pred * label, axis=-3), -1.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(dots))))


def delta_mtl(p_mtl, p_stl, higher_is_better) -> float:
    """Average signed relative per-task change vs single-task baselines, in %.

    For each task, (mtl - stl) / stl, negated when a lower value is better,
    averaged over tasks and scaled to percent. Positive means the multi-task
    model beats its single-task references on average.
    """
    p_mtl = np.asarray(p_mtl, dtype=np.float64)
    p_stl = np.asarray(p_stl, dtype=np.float64)
    flags = np.asarray(higher_is_better, dtype=bool)
    if not (p_mtl.shape == p_stl.shape == flags.shape):
        raise ValueError("per-task value lists must have equal length")
    if np.any(p_stl == 0):
        raise ZeroDivisionError("single-task reference value is zero")
    signs = np.where(flags, 1.0, -1.0)
    return float(100.0 * np.mean(signs * (p_mtl - p_stl) / p_stl))
