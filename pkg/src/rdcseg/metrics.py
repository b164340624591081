"""Confusion-matrix accumulation, per-class IoU and mIoU with a void class."""

from __future__ import annotations

import csv
from typing import Optional, Sequence

import numpy as np

from .fisheye import VOID


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions.

    Pixels whose truth is ``void_class`` are skipped. A void prediction on a
    non-void pixel is kept in ``void_predictions`` (one counter per true
    class): it is a false negative for the true class and nothing else.
    """

    def __init__(self, num_classes: int, void_class: int = VOID):
        if num_classes < 1:
            raise ValueError("need at least one class")
        if 0 <= void_class < num_classes:
            raise ValueError(f"void class {void_class} collides with evaluated classes [0, {num_classes})")
        self.num_classes = num_classes
        self.void_class = void_class
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.void_predictions = np.zeros(num_classes, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.void_predictions.sum())

    def check_labels(self, arr, what="labels"):
        bad = (arr != self.void_class) & ((arr < 0) | (arr >= self.num_classes))
        if bad.any():
            raise ValueError(f"{what} contains class {int(arr[bad][0])} outside [0, {self.num_classes}) "
                             f"and not void ({self.void_class})")

    def accumulate(self, prediction, truth) -> "ConfusionMatrix":
        prediction = np.asarray(prediction).astype(np.int64)
        truth = np.asarray(truth).astype(np.int64)
        if prediction.shape != truth.shape:
            raise ValueError(f"prediction shape {prediction.shape} != truth shape {truth.shape}")
        self.check_labels(prediction, "prediction")
        self.check_labels(truth, "truth")
        keep = truth != self.void_class
        t = truth[keep]
        p = prediction[keep]
        pv = p == self.void_class
        c = self.num_classes
        self.counts += np.bincount(t[~pv] * c + p[~pv], minlength=c * c).reshape(c, c)
        self.void_predictions += np.bincount(t[pv], minlength=c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes or other.void_class != self.void_class:
            raise ValueError("cannot merge matrices with different class layouts")
        out = ConfusionMatrix(self.num_classes, self.void_class)
        out.counts = self.counts + other.counts
        out.void_predictions = self.void_predictions + other.void_predictions
        return out

    __add__ = merge

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN marks classes with no TP, FP or FN (absent)."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp + self.void_predictions
        denom = tp + fp + fn
        out = np.full(self.num_classes, np.nan)
        present = denom > 0
        out[present] = tp[present] / denom[present]
        return out

    def mean_iou(self) -> float:
        iou = self.per_class_iou()
        present = ~np.isnan(iou)
        if not present.any():
            raise ValueError("no class is present; mIoU is undefined")
        return float(iou[present].mean())

    def write_counts_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["truth\\pred"] + [str(i) for i in range(self.num_classes)] + ["void"])
            for i in range(self.num_classes):
                w.writerow([str(i)] + [str(v) for v in self.counts[i]] + [str(self.void_predictions[i])])


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    return cm.per_class_iou()


def mean_iou(cm: ConfusionMatrix) -> float:
    return cm.mean_iou()


def write_metrics_csv(path, cm: ConfusionMatrix, class_names: Optional[Sequence[str]] = None):
    """One ``name,iou`` row per class (empty IoU for absent classes), then ``mIoU``."""
    names = list(class_names) if class_names else [f"class{i}" for i in range(cm.num_classes)]
    iou = cm.per_class_iou()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "iou"])
        for name, v in zip(names, iou):
            w.writerow([name, "" if np.isnan(v) else repr(float(v))])
        w.writerow(["mIoU", repr(cm.mean_iou())])
