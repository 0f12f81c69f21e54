"""Confusion-matrix segmentation metrics and image-level F1."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import IGNORE_LABEL


class ConfusionMatrix:
    """(C+1)x(C+1) pixel counts; rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes  # including background
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes):
            raise ValueError("counts shape does not match num_classes")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    n = cm.num_classes
    valid = gt != IGNORE_LABEL
    p, g = pred[valid].astype(np.int64), gt[valid].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= n):
        raise ValueError("illegal ground-truth label")
    if p.size and (p.min() < 0 or p.max() >= n):
        raise ValueError("illegal predicted label")
    counts = np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(n, cm.counts + counts)


def _check(cm):
    if cm.total <= 0:
        raise ValueError("empty confusion matrix")


def per_class_iou(cm: ConfusionMatrix):
    """IoU per class, NaN where the class is in neither prediction nor ground truth."""
    _check(cm)
    c = cm.counts
    inter = np.diag(c)
    union = c.sum(0) + c.sum(1) - inter
    iou = np.full(cm.num_classes, np.nan)
    ok = union > 0
    iou[ok] = inter[ok] / union[ok]
    return iou


def mean_iou(cm: ConfusionMatrix, include_background: bool = True):
    iou = per_class_iou(cm)
    sel = iou if include_background else iou[1:]
    sel = sel[~np.isnan(sel)]
    if sel.size == 0:
        raise ValueError("no classes to average")
    return float(sel.mean()), iou


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    _check(cm)
    return int(np.trace(cm.counts)) / cm.total


def mean_accuracy(cm: ConfusionMatrix, include_background: bool = True) -> float:
    _check(cm)
    rows = cm.counts.sum(1)
    diag = np.diag(cm.counts)
    idx = np.arange(cm.num_classes)
    keep = rows > 0
    if not include_background:
        keep &= idx > 0
    if not keep.any():
        raise ValueError("no classes to average")
    return float(np.mean(diag[keep] / rows[keep]))


def f1_scores(y_true, y_pred, average: str = "macro"):
    """Per-class F1 from binary indicator matrices of shape (n_images, C).

    F1 is 0 when precision + recall is 0. The macro mean runs over classes
    that have at least one positive label.
    """
    y_true = np.asarray(y_true, dtype=bool)
    y_pred = np.asarray(y_pred, dtype=bool)
    if y_true.shape != y_pred.shape or y_true.ndim != 2:
        raise ValueError("expected matching (n_images, C) indicator arrays")
    if y_true.shape[0] == 0:
        raise ValueError("empty label set")
    tp = (y_true & y_pred).sum(0)
    fp = (~y_true & y_pred).sum(0)
    fn = (y_true & ~y_pred).sum(0)
    denom = 2 * tp + fp + fn
    f1 = np.zeros(y_true.shape[1])
    nz = denom > 0
    f1[nz] = 2 * tp[nz] / denom[nz]
    if average == "macro":
        present = y_true.any(0)
        agg = float(f1[present].mean()) if present.any() else 0.0
    elif average == "micro":
        t, p, n = int(tp.sum()), int(fp.sum()), int(fn.sum())
        agg = 2 * t / (2 * t + p + n) if (2 * t + p + n) else 0.0
    else:
        raise ValueError(f"unknown average {average!r}")
    return f1, agg


def segmentation_report(cm: ConfusionMatrix, class_names=None, include_background=True) -> dict:
    miou, iou = mean_iou(cm, include_background)
    names = class_names or [str(i) for i in range(cm.num_classes)]
    report = {
        "mean_iou": miou,
        "mean_accuracy": mean_accuracy(cm, include_background),
        "pixel_accuracy": pixel_accuracy(cm),
        "pixels": cm.total,
    }
    rows = cm.counts.sum(1)
    for i, name in enumerate(names):
        report[f"iou.{name}"] = None if np.isnan(iou[i]) else float(iou[i])
        report[f"accuracy.{name}"] = float(cm.counts[i, i] / rows[i]) if rows[i] else None
    return report


def write_report(report: dict, path) -> None:
    """``key=value`` lines; the three headline metrics come first."""
    head = ("mean_iou", "mean_accuracy", "pixel_accuracy")
    lines = [f"{k}={_fmt(report[k])}" for k in head if k in report]
    lines += [f"{k}={_fmt(v)}" for k, v in report.items() if k not in head]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            if v == "nan":
                out[k] = None
            else:
                try:
                    out[k] = int(v) if v.lstrip("-").isdigit() else float(v)
                except ValueError:
                    out[k] = v
    return out


def _fmt(v):
    if v is None:
        return "nan"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)
