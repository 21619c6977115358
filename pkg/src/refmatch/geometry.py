"""Boxes, masks and the evaluation metrics reported on them.

Boxes are normalized ``(x, y, w, h)`` with the origin at the top-left corner.
Masks are ``(height, width)`` float arrays with values in ``[0, 1]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, FormatError, ValidationError

BOX_EPS = 1e-9
DICE_EPS = 1e-8
BCE_EPS = 1e-7


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite box {vals}")
        if not (-BOX_EPS <= self.x <= 1 + BOX_EPS and -BOX_EPS <= self.y <= 1 + BOX_EPS):
            raise ValidationError(f"box origin outside unit square: {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box must have positive size: {vals}")
        if self.x + self.w > 1 + BOX_EPS or self.y + self.h > 1 + BOX_EPS:
            raise ValidationError(f"box extends past unit square: {vals}")

    @property
    def area(self):
        return self.w * self.h

    @property
    def center(self):
        return (self.x + 0.5 * self.w, self.y + 0.5 * self.h)

    def as_list(self):
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_corners(cls, x0, y0, x1, y1):
        return cls(x0, y0, x1 - x0, y1 - y0)

    def mirrored(self):
        """Horizontal flip about x = 0.5."""
        return BBox(max(0.0, 1.0 - self.x - self.w), self.y, self.w, self.h)


class Mask:
    """Per-pixel values in [0, 1], stored row-major as ``values[row, col]``."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValidationError(f"mask must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("mask values must lie in [0, 1]")
        arr.setflags(write=False)
        self.values = arr

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def binarize(self, threshold=0.5):
        return Mask((self.values >= threshold).astype(np.float64))

    def bbox(self):
        """Normalized bounding box of the nonzero pixels, or None if empty."""
        rows = np.flatnonzero(self.values.any(axis=1))
        cols = np.flatnonzero(self.values.any(axis=0))
        if rows.size == 0:
            return None
        return BBox.from_corners(
            cols[0] / self.width, rows[0] / self.height,
            (cols[-1] + 1) / self.width, (rows[-1] + 1) / self.height,
        )

    def __eq__(self, other):
        return isinstance(other, Mask) and self.shape == other.shape and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"Mask({self.width}x{self.height}, sum={self.values.sum():.4g})"


def _check_same_shape(a: Mask, b: Mask):
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")


def _intersection(a: BBox, b: BBox):
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    return max(iw, 0.0) * max(ih, 0.0)


def box_iou(a: BBox, b: BBox) -> float:
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def box_giou(a: BBox, b: BBox) -> float:
    """Generalized IoU: IoU minus the share of the enclosing box not covered by the union."""
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    enclose = (max(a.x + a.w, b.x + b.w) - min(a.x, b.x)) * (max(a.y + a.h, b.y + b.h) - min(a.y, b.y))
    iou = inter / union
    return iou - (enclose - union) / enclose


def mask_dice(pred: Mask, gt: Mask) -> float:
    _check_same_shape(pred, gt)
    p, g = pred.values, gt.values
    return float(2.0 * np.sum(p * g) / (np.sum(p) + np.sum(g) + DICE_EPS))


def mask_iou(pred: Mask, gt: Mask) -> float:
    """Soft Jaccard index; equals pixel IoU for binary masks."""
    inter, union = mask_overlap(pred, gt)
    return float(inter / union) if union > 0 else 0.0


def mask_overlap(pred: Mask, gt: Mask):
    _check_same_shape(pred, gt)
    inter = float(np.sum(pred.values * gt.values))
    union = float(np.sum(pred.values) + np.sum(gt.values) - inter)
    return inter, union


def mask_bce(pred: Mask, gt: Mask) -> float:
    _check_same_shape(pred, gt)
    p = np.clip(pred.values, BCE_EPS, 1.0 - BCE_EPS)
    g = gt.values
    return float(np.mean(-(g * np.log(p) + (1.0 - g) * np.log1p(-p))))


def _interpolated_area(tp_flags: Sequence[bool], n_gt: int) -> float:
    if n_gt == 0:
        return 0.0 if len(tp_flags) else 1.0
    if not len(tp_flags):
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(tp_flags, dtype=np.float64))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    # precision envelope, right to left
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(preds, gts, iou_thresholds) -> float:
    """All-point interpolated AP averaged over IoU thresholds.

    ``preds`` holds ``(BBox, confidence, label)`` triples and ``gts`` holds
    ``(BBox, label)`` pairs. Predictions are matched greedily in descending
    confidence (ties keep input order) to the unmatched same-label ground
    truth with the highest IoU at or above the threshold. All labels share a
    single precision/recall curve. With no ground truth the result is 1.0
    when there are also no predictions and 0.0 otherwise.
    """
    thresholds = list(iou_thresholds)
    if not thresholds:
        raise ValidationError("at least one IoU threshold is required")
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ValidationError(f"IoU threshold {t} outside (0, 1)")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValidationError("IoU thresholds must be strictly increasing")

    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    ious = np.zeros((len(preds), len(gts)))
    for i, (pbox, _, plabel) in enumerate(preds):
        for j, (gbox, glabel) in enumerate(gts):
            if plabel == glabel:
                ious[i, j] = box_iou(pbox, gbox)
            else:
                ious[i, j] = -1.0

    total = 0.0
    for t in thresholds:
        taken = np.zeros(len(gts), dtype=bool)
        flags = []
        for i in order:
            row = np.where(taken, -1.0, ious[i]) if len(gts) else ious[i]
            j = int(np.argmax(row)) if len(gts) else -1
            if j >= 0 and row[j] >= t:
                taken[j] = True
                flags.append(True)
            else:
                flags.append(False)
        total += _interpolated_area(flags, len(gts))
    return total / len(thresholds)


@dataclass
class SampleResult:
    """Outcome of one labeled query; metrics that do not apply stay None."""

    label: str
    correct: Optional[bool] = None
    dice: Optional[float] = None
    mask_inter: Optional[float] = None
    mask_union: Optional[float] = None
    box_iou: Optional[float] = None
    ap: Optional[float] = None

    @property
    def mask_iou(self):
        if self.mask_inter is None:
            return None
        return self.mask_inter / self.mask_union if self.mask_union > 0 else 0.0


@dataclass
class LabelMetrics:
    dice: Optional[float] = None
    giou: Optional[float] = None
    iou: Optional[float] = None
    ap: Optional[float] = None
    accuracy: Optional[float] = None

    def as_dict(self):
        return {"dice": self.dice, "giou": self.giou, "iou": self.iou, "ap": self.ap, "accuracy": self.accuracy}


@dataclass
class MetricReport:
    per_label: dict = field(default_factory=dict)
    mean_dice: Optional[float] = None
    mean_giou: Optional[float] = None
    accuracy: Optional[float] = None
    n_samples: int = 0

    def to_dict(self):
        return {
            "per_label": {k: self.per_label[k].as_dict() for k in sorted(self.per_label)},
            "mean_dice": self.mean_dice,
            "mean_giou": self.mean_giou,
            "accuracy": self.accuracy,
            "n_samples": self.n_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data):
        try:
            per_label = {str(k): LabelMetrics(**v) for k, v in data["per_label"].items()}
            return cls(per_label, data["mean_dice"], data["mean_giou"], data["accuracy"],
                       int(data.get("n_samples", 0)))
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValidationError(f"malformed metric report: {exc!r}") from exc

    @classmethod
    def from_json(cls, text: str):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(exc.msg, offset=len(text[: exc.pos].encode("utf-8"))) from exc
        return cls.from_dict(data)


def _mean(values: Iterable[Optional[float]]):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate_report(samples, giou_mode="per_sample") -> MetricReport:
    """Fold per-sample results into a MetricReport.

    ``giou_mode="per_sample"`` averages each sample's mask IoU;
    ``"pooled"`` divides summed intersections by summed unions.
    """
    samples = list(samples)
    if not samples:
        raise ValidationError("cannot aggregate an empty result list")
    if giou_mode not in ("per_sample", "pooled"):
        raise ValidationError(f"unknown giou_mode {giou_mode!r}")

    def giou_of(group):
        with_mask = [s for s in group if s.mask_inter is not None]
        if not with_mask:
            return None
        if giou_mode == "pooled":
            union = sum(s.mask_union for s in with_mask)
            return sum(s.mask_inter for s in with_mask) / union if union > 0 else 0.0
        return _mean(s.mask_iou for s in with_mask)

    def accuracy_of(group):
        judged = [s.correct for s in group if s.correct is not None]
        return sum(judged) / len(judged) if judged else None

    per_label = {}
    for label in sorted({s.label for s in samples}):
        group = [s for s in samples if s.label == label]
        per_label[label] = LabelMetrics(
            dice=_mean(s.dice for s in group),
            giou=giou_of(group),
            iou=_mean(s.box_iou for s in group),
            ap=_mean(s.ap for s in group),
            accuracy=accuracy_of(group),
        )
    return MetricReport(
        per_label=per_label,
        mean_dice=_mean(s.dice for s in samples),
        mean_giou=giou_of(samples),
        accuracy=accuracy_of(samples),
        n_samples=len(samples),
    )
