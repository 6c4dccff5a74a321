from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .objectives import IGNORE_INDEX


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int):
        self.num_classes = int(num_classes)
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored_pixels = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored_pixels

    def accumulate(self, pred: np.ndarray, gt: np.ndarray, ignore_index: int = IGNORE_INDEX) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"mask shapes differ: pred {pred.shape} vs gt {gt.shape}")
        K = self.num_classes
        ignored = gt == ignore_index
        bad_gt = ~ignored & ((gt < 0) | (gt >= K))
        bad_pred = ~ignored & ((pred < 0) | (pred >= K))
        for bad, which in ((bad_gt, "ground truth"), (bad_pred, "prediction")):
            if bad.any():
                where = tuple(int(i) for i in np.argwhere(bad)[0])
                src = gt if which == "ground truth" else pred
                raise ValueError(f"invalid {which} id {int(src[where])} at pixel {where}")
        keep = ~ignored
        idx = gt[keep].astype(np.int64) * K + pred[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=K * K).reshape(K, K)
        self.ignored_pixels += int(ignored.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        out.ignored_pixels = self.ignored_pixels + other.ignored_pixels
        return out


def iou(cm: ConfusionMatrix) -> np.ndarray:
    """Per-class IoU; NaN where TP + FP + FN == 0."""
    if cm.counts.sum() == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def miou(cm: ConfusionMatrix, subset: Optional[Iterable[int]] = None) -> float:
    vals = iou(cm)
    if subset is not None:
        vals = vals[list(subset)]
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        raise ValueError("no class with a nonzero IoU denominator")
    return float(vals.mean())


def write_iou_csv(cm: ConfusionMatrix, path, class_names: Optional[list[str]] = None) -> Path:
    path = Path(path)
    vals = iou(cm)
    names = class_names or [str(k) for k in range(cm.num_classes)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "iou"])
        for name, v in zip(names, vals):
            w.writerow([name, "" if np.isnan(v) else f"{v:.6f}"])
        w.writerow(["mIoU", f"{miou(cm):.6f}"])
    return path
