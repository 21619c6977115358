"""Adapter training: Dice+BCE loss, analytic gradients, gradient checks and an
Adam loop with warmup-then-cosine learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, TrainingError, ValidationError
from .fusion import AdapterMLP, MemoryBank, attend_memory, build_memory_slots, decode_logits, sigmoid
from .geometry import BCE_EPS, DICE_EPS, Mask, mask_bce, mask_dice
from .rng import rng_for
from .synth import (GridSpec, SceneConfig, ScenePair, feature_grid, generate_scene_pair, intensity_levels,
                    make_seg_embedding, region_intensity)

FD_SUBSAMPLE = 10_000
FD_ABS_FLOOR = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    w_bce: float = 0.7
    w_dice: float = 0.3
    learning_rate: float = 2e-4
    warmup_fraction: float = 0.03
    weight_decay: float = 0.0
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: int = 256
    init_decoder_bias: float = 0.0
    init_out_scale: float = 1.0

    def __post_init__(self):
        if abs(self.w_bce + self.w_dice - 1.0) > 1e-12 or self.w_bce < 0 or self.w_dice < 0:
            raise ValidationError("loss weights must be nonnegative and sum to 1")
        if not self.learning_rate >= 0:
            raise ValidationError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if not 0 <= self.warmup_fraction < 0.5:
            raise ValidationError(f"warmup_fraction must lie in [0, 0.5), got {self.warmup_fraction}")
        if self.epochs < 1 or self.batch_size != 1:
            raise ValidationError("need epochs >= 1 and batch_size == 1")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be nonnegative")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        extra = set(data) - known - {"schema_version"}
        if extra:
            raise ValidationError(f"unknown train config keys: {sorted(extra)}")
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class SegInstance:
    """One training example: seg embedding, memory bank, target grid, target mask."""

    h: np.ndarray
    bank: MemoryBank
    grid: np.ndarray
    gt: Mask
    label: str = ""

    def __post_init__(self):
        if self.grid.shape[:2] != self.gt.shape:
            raise DimensionError(f"grid {self.grid.shape[:2]} does not match mask {self.gt.shape}")


def instances_from_pair(pair: ScenePair, d_vlm=128, grid_spec: GridSpec = GridSpec(), labels=None):
    ref_grid = feature_grid(pair.reference_image, grid_spec)
    tgt_grid = feature_grid(pair.target_image, grid_spec)
    bank = build_memory_slots(pair.reference, ref_grid)
    out = []
    for label in labels if labels is not None else pair.reference.labels:
        h = make_seg_embedding(pair, label, d_vlm)
        out.append(SegInstance(h, bank, tgt_grid, pair.target_regions[label], label))
    return out


def level_curriculum(n_instances=20, scene_cfg: SceneConfig = SceneConfig(), first_seed=0, d_vlm=128,
                     grid_spec: GridSpec = GridSpec(), max_scenes=10_000):
    """One instance per scene, cycling through every grey level in turn.

    Scene ``k`` is generated with seed ``first_seed + k``; a scene lacking
    the wanted level is skipped. Returns the instances and the seeds used.
    """
    levels = intensity_levels(scene_cfg)
    out, seeds = [], []
    seed = first_seed
    while len(out) < n_instances:
        if seed - first_seed >= max_scenes:
            raise ValidationError(f"could not cover {len(levels)} levels within {max_scenes} scenes")
        want = levels[len(out) % len(levels)]
        pair = generate_scene_pair(replace(scene_cfg, seed=seed))
        for label in pair.reference.labels:
            if abs(region_intensity(pair.reference_image, pair.reference.mask(label)) - want) < 1e-9:
                out += instances_from_pair(pair, d_vlm, grid_spec, labels=[label])
                seeds.append(seed)
                break
        seed += 1
    return out, seeds


def seg_loss(pred: Mask, gt: Mask, cfg: TrainConfig = TrainConfig()) -> float:
    return cfg.w_bce * mask_bce(pred, gt) + cfg.w_dice * (1.0 - mask_dice(pred, gt))


def _loss_from_probs(p, g, cfg):
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    bce = np.mean(-(g * np.log(pc) + (1.0 - g) * np.log1p(-pc)))
    dice = 2.0 * np.sum(p * g) / (np.sum(p) + np.sum(g) + DICE_EPS)
    return cfg.w_bce * bce + cfg.w_dice * (1.0 - dice), dice


def forward_loss(mlp: AdapterMLP, inst: SegInstance, cfg: TrainConfig = TrainConfig()):
    """(loss, soft dice) of one instance."""
    fused = attend_memory(mlp.forward(inst.h), inst.bank)
    p = sigmoid(decode_logits(fused.z, inst.grid, mlp.decoder_bias))
    loss, dice = _loss_from_probs(p, inst.gt.values, cfg)
    return float(loss), float(dice)


def loss_gradients(mlp: AdapterMLP, inst: SegInstance, cfg: TrainConfig = TrainConfig()):
    """Loss, soft dice and a gradient shaped like ``mlp`` (an AdapterMLP of gradients)."""
    out, inputs, pre = mlp.forward(inst.h, keep=True)
    fused = attend_memory(out, inst.bank)
    M, alpha = inst.bank.slots, fused.alpha
    logits = decode_logits(fused.z, inst.grid, mlp.decoder_bias)
    p = sigmoid(logits)
    g = inst.gt.values
    loss, dice = _loss_from_probs(p, g, cfg)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")

    # d loss / d p
    n = p.size
    inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    d_bce = np.where(inside, (-g / np.where(inside, p, 1.0) + (1.0 - g) / np.where(inside, 1.0 - p, 1.0)) / n, 0.0)
    s = np.sum(p) + np.sum(g) + DICE_EPS
    inter = np.sum(p * g)
    d_dice = (2.0 * g * s - 2.0 * inter) / s ** 2
    d_p = cfg.w_bce * d_bce - cfg.w_dice * d_dice

    d_logit = d_p * p * (1.0 - p)
    d_bias = float(np.sum(d_logit))
    d_z = np.tensordot(d_logit, inst.grid, axes=([0, 1], [0, 1]))
    d_alpha = M @ d_z
    d_scores = alpha * (d_alpha - alpha @ d_alpha)
    d_out = M.T @ d_scores

    grad_w, grad_b = [None] * len(mlp.weights), [None] * len(mlp.weights)
    delta = d_out
    for i in range(len(mlp.weights) - 1, -1, -1):
        grad_w[i] = np.outer(inputs[i], delta)
        grad_b[i] = delta
        if i:
            delta = (mlp.weights[i] @ delta) * (pre[i - 1] > 0)
    return float(loss), float(dice), AdapterMLP(grad_w, grad_b, d_bias)


@dataclass
class GradCheck:
    max_rel_error: float  # over coordinates whose gradient magnitude clears the floor
    max_abs_error: float
    passed: bool
    worst_index: int
    failures: list  # flat indices that missed both tolerances
    n_checked: int


def finite_diff_check(mlp: AdapterMLP, inst: SegInstance, step=1e-5, tolerance=1e-4,
                      cfg: TrainConfig = TrainConfig(), analytic: Optional[np.ndarray] = None, seed=0) -> GradCheck:
    """Compare analytic gradients with central differences.

    Every coordinate is checked up to ``FD_SUBSAMPLE`` coordinates, above
    that a seeded random subset. A coordinate passes when its relative error
    is below ``tolerance`` or its absolute error is below ``FD_ABS_FLOOR``.
    ``analytic`` overrides the computed gradient (flat), for fault injection.
    """
    if step <= 0:
        raise ValidationError("finite-difference step must be positive")
    if analytic is None:
        analytic = loss_gradients(mlp, inst, cfg)[2].flat()
    base = mlp.flat()
    if base.size > FD_SUBSAMPLE:
        idx = np.sort(rng_for(seed, "fd-subsample").choice(base.size, FD_SUBSAMPLE, replace=False))
    else:
        idx = np.arange(base.size)
    probe = mlp.copy()
    worst, worst_abs, worst_i, failures = 0.0, 0.0, -1, []
    for i in idx:
        vec = base.copy()
        vec[i] = base[i] + step
        up = forward_loss(probe.set_flat(vec), inst, cfg)[0]
        vec[i] = base[i] - step
        down = forward_loss(probe.set_flat(vec), inst, cfg)[0]
        numeric = (up - down) / (2.0 * step)
        a = analytic[i]
        abs_err = abs(a - numeric)
        scale = max(abs(a), abs(numeric))
        rel = abs_err / scale if scale > 0 else 0.0
        ok = rel < tolerance or abs_err < FD_ABS_FLOOR
        worst_abs = max(worst_abs, abs_err)
        if not ok:
            failures.append(int(i))
        if scale >= FD_ABS_FLOOR and rel > worst:
            worst, worst_i = rel, int(i)
    return GradCheck(worst, worst_abs, not failures, worst_i, failures, int(idx.size))


def lr_at(step: int, total_steps: int, cfg: TrainConfig = TrainConfig()) -> float:
    if total_steps <= 0:
        raise ValidationError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside 0..{total_steps}")
    warm = cfg.warmup_fraction * total_steps
    if step < warm:
        return cfg.learning_rate * step / warm
    progress = (step - warm) / (total_steps - warm)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainTrace:
    loss: list = field(default_factory=list)
    dice: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seed: int = 0

    def rows(self):
        return [(i, l, d, r) for i, (l, d, r) in enumerate(zip(self.loss, self.dice, self.lr))]

    def to_csv(self) -> str:
        lines = ["step,loss,dice,lr"]
        lines += [f"{i},{l!r},{d!r},{r!r}" for i, l, d, r in self.rows()]
        return "\n".join(lines) + "\n"


def smoothed(values, window=20):
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")


def train_adapter(dataset: Sequence[SegInstance], cfg: TrainConfig = TrainConfig(), init: Optional[AdapterMLP] = None):
    """Adam over adapter weights and decoder bias, one instance per step.

    Instances are visited in dataset order every epoch, so a moving average
    over one epoch's worth of steps sees every instance once.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValidationError("training needs a non-empty dataset")
    d_vlm, d = dataset[0].h.shape[0], dataset[0].bank.slots.shape[1]
    mlp = init.copy() if init is not None else AdapterMLP.init((d_vlm, cfg.hidden, d), cfg.seed, cfg.init_decoder_bias, cfg.init_out_scale)
    theta = mlp.flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    total = cfg.epochs * len(dataset)
    trace = TrainTrace(seed=cfg.seed)
    for step in range(total):
        inst = dataset[step % len(dataset)]
        try:
            loss, dice, grad = loss_gradients(mlp, inst, cfg)
        except TrainingError as exc:
            raise TrainingError(exc.message, step) from None
        lr = lr_at(step, total, cfg)
        trace.loss.append(loss)
        trace.dice.append(dice)
        trace.lr.append(lr)
        gvec = grad.flat()
        m = cfg.beta1 * m + (1 - cfg.beta1) * gvec
        v = cfg.beta2 * v + (1 - cfg.beta2) * gvec * gvec
        m_hat = m / (1 - cfg.beta1 ** (step + 1))
        v_hat = v / (1 - cfg.beta2 ** (step + 1))
        theta = theta - lr * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * theta)
        mlp.set_flat(theta)
    return mlp, trace


def evaluate_adapter(mlp: AdapterMLP, dataset: Sequence[SegInstance], threshold=0.5):
    """Mean Dice of binarized predictions."""
    dices = []
    for inst in dataset:
        fused = attend_memory(mlp.forward(inst.h), inst.bank)
        pred = Mask(sigmoid(decode_logits(fused.z, inst.grid, mlp.decoder_bias))).binarize(threshold)
        dices.append(mask_dice(pred, inst.gt))
    return float(np.mean(dices))


# budget frozen for the desk-scale seg runs: 20-instance level curriculum, 2000 steps
DESK_TRAIN_CONFIG = TrainConfig(learning_rate=1e-3, epochs=100, init_decoder_bias=-4.0, init_out_scale=0.01)
