"""Scalar rewards for labeling, detection and segmentation outputs, plus
group-relative advantage normalization."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import Mask, average_precision, mask_bce, mask_dice

ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
ADV_EPS = 1e-8


@dataclass(frozen=True)
class RewardConfig:
    lambda_acc: float = 0.9
    lambda_fmt: float = 0.1
    lambda_det: float = 0.9
    w_bce: float = 0.7
    w_dice: float = 0.3
    start_threshold: float = 0.50
    step_increment: float = 0.05
    final_threshold: float = 0.95
    steps_per_stage: int = 100

    def __post_init__(self):
        for name in ("lambda_acc", "lambda_fmt", "lambda_det", "w_bce", "w_dice"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be a nonnegative finite number, got {v}")
        if self.lambda_acc + self.lambda_fmt <= 0:
            raise ValidationError("lambda_acc + lambda_fmt must be positive")
        if not (0 < self.start_threshold <= self.final_threshold < 1):
            raise ValidationError("curriculum thresholds must satisfy 0 < start <= final < 1")
        if self.step_increment <= 0:
            raise ValidationError("step_increment must be positive")
        if int(self.steps_per_stage) != self.steps_per_stage or self.steps_per_stage < 1:
            raise ValidationError("steps_per_stage must be a positive integer")


@dataclass
class RewardResult:
    total: float
    components: dict = field(default_factory=dict)
    valid_format: bool = True

    def to_dict(self):
        return {"total": self.total, "components": dict(self.components), "valid_format": self.valid_format}


def _combine(weighted, valid):
    """``weighted`` maps term -> (weight, value); total is the weighted sum."""
    total = 0.0
    for weight, value in weighted.values():
        total += weight * value
    return RewardResult(total, {k: v for k, (_, v) in weighted.items()}, valid)


def parse_format(raw: str, labels):
    """Return ``(valid, label)``; valid only for a single well-formed answer
    block naming a known label."""
    found = ANSWER_RE.findall(raw) if isinstance(raw, str) else []
    if len(found) != 1 or raw.count("<answer>") != 1 or raw.count("</answer>") != 1:
        return False, None
    label = found[0].strip()
    if label not in set(labels):
        return False, None
    return True, label


def format_answer(label: str) -> str:
    return f"<answer>{label}</answer>"


def vqa_reward(predicted, gold, valid_format, cfg: RewardConfig = RewardConfig()) -> RewardResult:
    acc = 1.0 if (predicted is not None and predicted == gold) else 0.0
    fmt = 1.0 if valid_format else 0.0
    return _combine({"accuracy": (cfg.lambda_acc, acc), "format": (cfg.lambda_fmt, fmt)}, bool(valid_format))


def curriculum_thresholds(step: int, cfg: RewardConfig = RewardConfig()):
    if step < 0:
        raise ValidationError(f"step must be nonnegative, got {step}")
    stage = step // cfg.steps_per_stage
    n_max = int(round((cfg.final_threshold - cfg.start_threshold) / cfg.step_increment)) + 1
    n = min(stage + 1, n_max)
    return [round(cfg.start_threshold + cfg.step_increment * i, 10) for i in range(n)]


def detection_reward(preds, gts, valid_format, step, cfg: RewardConfig = RewardConfig()) -> RewardResult:
    """``preds`` are ``(BBox, confidence, label)``, ``gts`` are ``(BBox, label)``."""
    ap = average_precision(preds, gts, curriculum_thresholds(step, cfg))
    fmt = 1.0 if valid_format else 0.0
    return _combine({"ap": (cfg.lambda_det, ap), "format": (cfg.lambda_fmt, fmt)}, bool(valid_format))


def segmentation_reward(pred: Mask, gt: Mask, cfg: RewardConfig = RewardConfig()) -> RewardResult:
    bce_score = math.exp(-mask_bce(pred, gt))
    dice = mask_dice(pred, gt)
    return _combine({"bce_score": (cfg.w_bce, bce_score), "dice": (cfg.w_dice, dice)}, True)


def group_advantages(rewards):
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValidationError("advantages need a non-empty 1-D group")
    std = r.std()
    if r.size == 1 or std < ADV_EPS:
        return [0.0] * r.size
    return [float(v) for v in (r - r.mean()) / std]
