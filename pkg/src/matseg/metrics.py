"""Binary segmentation metrics: IoU, Dice, pixel accuracy.

Dataset summaries are macro averages (mean of per-image scores). When
prediction and ground truth are both empty, IoU and Dice are 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricSummary:
    mean_iou: float
    mean_dice: float
    mean_pixel_accuracy: float
    n_images: int

    def as_dict(self) -> dict:
        return {
            "mean_iou": self.mean_iou,
            "mean_dice": self.mean_dice,
            "mean_pixel_accuracy": self.mean_pixel_accuracy,
            "n_images": self.n_images,
        }


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold must lie in [0, 1], got {threshold}")
    return (np.asarray(probs) > threshold).astype(np.uint8)


def _as_bool_pair(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    return pred.astype(bool), gt.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _as_bool_pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def iou_from_counts(c: ConfusionCounts) -> float:
    union = c.tp + c.fp + c.fn
    return 1.0 if union == 0 else c.tp / union


def dice_from_counts(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def pixel_accuracy_from_counts(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total


def iou(pred, gt) -> float:
    return iou_from_counts(confusion(pred, gt))


def dice(pred, gt) -> float:
    return dice_from_counts(confusion(pred, gt))


def pixel_accuracy(pred, gt) -> float:
    return pixel_accuracy_from_counts(confusion(pred, gt))


def evaluate_dataset(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> MetricSummary:
    if len(preds) != len(gts):
        raise ValidationError(f"{len(preds)} predictions but {len(gts)} ground-truth masks")
    if not preds:
        raise ValidationError("cannot evaluate an empty dataset")
    ious, dices, accs = [], [], []
    for p, g in zip(preds, gts):
        c = confusion(p, g)
        ious.append(iou_from_counts(c))
        dices.append(dice_from_counts(c))
        accs.append(pixel_accuracy_from_counts(c))
    return MetricSummary(float(np.mean(ious)), float(np.mean(dices)), float(np.mean(accs)), len(preds))
