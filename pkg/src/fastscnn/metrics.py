"""Confusion-matrix metrics: class mIoU, category mIoU, pixel accuracy."""
from __future__ import annotations

from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .functional import IGNORE_ID

CITYSCAPES_CLASSES = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
    "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
    "truck", "bus", "train", "motorcycle", "bicycle",
)
CITYSCAPES_CATEGORIES = ("flat", "construction", "object", "nature", "sky", "human", "vehicle")
# Cityscapes' published grouping of the 19 evaluation classes.
CITYSCAPES_CATEGORY_MAP = (0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 4, 5, 5, 6, 6, 6, 6, 6, 6)


class ConfusionMatrix:
    """``counts[gt, pred]`` over non-ignored pixels."""

    def __init__(self, num_classes: int, ignore_id: int = IGNORE_ID):
        self.num_classes = num_classes
        self.ignore_id = ignore_id
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
        k = self.num_classes
        keep = gt != self.ignore_id
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if g.size and (g.min() < 0 or g.max() >= k):
            raise ValueError(f"ground-truth ids outside [0, {k}) and not {self.ignore_id}")
        if p.size and (p.min() < 0 or p.max() >= k):
            raise ValueError(f"predicted ids outside [0, {k})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices with different class counts")
        out = ConfusionMatrix(self.num_classes, self.ignore_id)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def pixel_accuracy(self) -> float:
        return float(np.trace(self.counts) / max(self.total, 1))


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def _counts(cm) -> np.ndarray:
    return cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)


def miou(cm: Union[ConfusionMatrix, np.ndarray]) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean.

    Classes absent from both ground truth and prediction have IoU ``nan`` and
    are left out of the mean.
    """
    c = _counts(cm).astype(np.float64)
    diag = np.diag(c)
    denom = c.sum(axis=0) + c.sum(axis=1) - diag
    iou = np.full(len(diag), np.nan)
    defined = denom > 0
    iou[defined] = diag[defined] / denom[defined]
    mean = float(iou[defined].mean()) if defined.any() else float("nan")
    return iou, mean


def collapse(cm: Union[ConfusionMatrix, np.ndarray], mapping: Sequence[int]) -> np.ndarray:
    c = _counts(cm)
    k = c.shape[0]
    mapping = np.asarray(mapping)
    if mapping.shape != (k,) or (mapping < 0).any():
        raise ValueError(f"category map must assign each of the {k} classes a category id, got {mapping.tolist()}")
    onehot = np.zeros((k, int(mapping.max()) + 1), dtype=np.int64)
    onehot[np.arange(k), mapping] = 1
    return onehot.T @ c @ onehot


def category_miou(cm: Union[ConfusionMatrix, np.ndarray], mapping: Sequence[int]) -> float:
    return miou(collapse(cm, mapping))[1]


def default_category_map(num_classes: int) -> tuple:
    return CITYSCAPES_CATEGORY_MAP if num_classes == 19 else tuple(range(num_classes))


def class_names(num_classes: int) -> tuple:
    return CITYSCAPES_CLASSES if num_classes == 19 else tuple(f"class{i}" for i in range(num_classes))


def evaluate(model, samples: Iterable, num_classes: int, ignore_id: int = IGNORE_ID) -> ConfusionMatrix:
    """Run cls-mode inference over ``samples`` and accumulate a confusion matrix."""
    cm = ConfusionMatrix(num_classes, ignore_id)
    for s in samples:
        cm.accumulate(model.infer(s.image, "cls"), s.label)
    return cm


def format_report(cm: ConfusionMatrix, names: Optional[Sequence[str]] = None,
                  category_map: Optional[Sequence[int]] = None) -> str:
    names = names or class_names(cm.num_classes)
    category_map = category_map or default_category_map(cm.num_classes)
    iou, mean = miou(cm)
    lines = [f"{'class':<16}{'IoU':>8}"]
    for name, v in zip(names, iou):
        lines.append(f"{name:<16}{'n/a' if np.isnan(v) else f'{v:.4f}':>8}")
    lines.append("")
    lines.append(f"miou_class={mean:.6f}")
    lines.append(f"miou_category={category_miou(cm, category_map):.6f}")
    lines.append(f"pixel_accuracy={cm.pixel_accuracy():.6f}")
    return "\n".join(lines)
