"""Scene-completion and semantic-scene-completion scores from voxel counts."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .voxel_data import IGNORE, MaskState


def logits_to_labels(scores) -> np.ndarray:
    """Argmax over the class axis (axis -4); exact ties go to the lowest class."""
    a = scores.detach().cpu().numpy() if hasattr(scores, "detach") else np.asarray(scores)
    return np.argmax(a, axis=-4).astype(np.uint8)


def _ratio(num, den, both_empty):
    if den > 0:
        return num / den
    return 1.0 if both_empty else 0.0


@dataclass
class Counts:
    """Additive voxel counts; dataset metrics sum these before any ratio."""
    num_classes: int
    tp: int = 0
    fp: int = 0
    fn: int = 0
    inter: np.ndarray = None
    union: np.ndarray = None
    support: np.ndarray = None
    occluded: int = 0

    def __post_init__(self):
        z = np.zeros(self.num_classes, dtype=np.int64)
        self.inter = z.copy() if self.inter is None else self.inter
        self.union = z.copy() if self.union is None else self.union
        self.support = z.copy() if self.support is None else self.support

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.num_classes, self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                      self.inter + other.inter, self.union + other.union,
                      self.support + other.support, self.occluded + other.occluded)


def _sc_counts(pred, gt, mask):
    occl = (mask == MaskState.OCCLUDED) & (gt != IGNORE)
    p_occ = pred[occl] > 0
    g_occ = gt[occl] > 0
    tp = int(np.sum(p_occ & g_occ))
    fp = int(np.sum(p_occ & ~g_occ))
    fn = int(np.sum(~p_occ & g_occ))
    return tp, fp, fn, int(occl.sum())


def _check(pred, gt, mask):
    pred, gt, mask = np.asarray(pred), np.asarray(gt), np.asarray(mask)
    if not (pred.shape == gt.shape == mask.shape):
        raise ValueError(f"shape mismatch: {pred.shape}, {gt.shape}, {mask.shape}")
    return pred, gt, mask


def count(pred, gt, mask, num_classes: int) -> Counts:
    pred, gt, mask = _check(pred, gt, mask)
    tp, fp, fn, n_occ = _sc_counts(pred, gt, mask)

    scored = ((mask == MaskState.OCCLUDED) | (mask == MaskState.VISIBLE)) & (gt != IGNORE)
    p = pred[scored].astype(np.int64)
    g = gt[scored].astype(np.int64)
    k = num_classes + 1
    if g.size and g.max() >= k:
        raise ValueError(f"ground-truth label {g.max()} exceeds class count {num_classes}")
    p = np.where(p < k, p, 0)  # out-of-range predictions never match a class
    conf = np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    inter = np.diag(conf)[1:]
    union = conf.sum(0)[1:] + conf.sum(1)[1:] - inter
    return Counts(num_classes, tp, fp, fn, inter, union, conf.sum(1)[1:], n_occ)


@dataclass
class MetricsReport:
    sc_precision: float
    sc_recall: float
    sc_iou: float
    per_class_iou: List[Optional[float]]
    ssc_miou: float
    supports: List[int] = field(default_factory=list)

    @classmethod
    def from_counts(cls, c: Counts) -> "MetricsReport":
        tp, fp, fn = c.tp, c.fp, c.fn
        prec = _ratio(tp, tp + fp, tp + fn == 0)
        rec = _ratio(tp, tp + fn, tp + fp == 0)
        iou = _ratio(tp, tp + fp + fn, True)
        per_class = [float(i) / u if u > 0 else None for i, u in zip(c.inter, c.union)]
        valid = [v for v in per_class if v is not None]
        miou = float(np.mean(valid)) if valid else 0.0
        return cls(prec, rec, iou, per_class, miou, [int(s) for s in c.support])

    def to_dict(self):
        return {
            "sc_precision": self.sc_precision,
            "sc_recall": self.sc_recall,
            "sc_iou": self.sc_iou,
            "per_class_iou": self.per_class_iou,
            "ssc_miou": self.ssc_miou,
            "supports": self.supports,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def sc_metrics(pred, gt, mask):
    """Occupancy precision, recall and IoU over OCCLUDED voxels."""
    tp, fp, fn, n_occ = _sc_counts(*_check(pred, gt, mask))
    if n_occ == 0:
        raise ValueError("no occluded voxels to score")
    r = MetricsReport.from_counts(Counts(1, tp, fp, fn))
    return r.sc_precision, r.sc_recall, r.sc_iou


def ssc_miou(pred, gt, mask, num_classes: int):
    """Per-class IoU for classes 1..C over VISIBLE and OCCLUDED voxels, and
    their mean over classes with a non-empty union (None marks the others)."""
    r = MetricsReport.from_counts(count(pred, gt, mask, num_classes))
    return r.per_class_iou, r.ssc_miou


def evaluate(pred, gt, mask, num_classes: int) -> MetricsReport:
    return MetricsReport.from_counts(count(pred, gt, mask, num_classes))
