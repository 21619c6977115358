"""Synthetic reference/target scenes and the deterministic stand-ins for the
pretrained models: retrieval features, per-pixel feature grids, the
relational labeler and ``<Seg>`` embeddings.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import PlacementError, ValidationError
from .geometry import BBox, Mask
from .ot import MatchConfig, match_cost
from .retrieval import Template
from .rng import rng_for

DEFAULT_LABELS = (
    "liver", "spleen", "stomach", "pancreas", "kidney_l", "kidney_r", "aorta", "gallbladder",
    "duodenum", "colon", "bladder", "esophagus", "adrenal_l", "adrenal_r", "ivc", "portal_vein",
)
SHAPES = ("ellipse", "rect", "ribbon")
MAX_ATTEMPTS = 1000
MAX_ENUMERATION = 8


@dataclass
class SceneConfig:
    n_regions: int = 8
    labels: Optional[tuple] = None
    canvas: tuple = (64, 64)
    position_noise: float = 0.05
    scale_noise: float = 0.05
    intensity_range: tuple = (0.2, 1.0)
    mirror_prob: float = 0.0
    seed: int = 0
    size_range: tuple = (0.05, 0.11)
    shapes: tuple = SHAPES
    min_intensity_gap: float = 0.08
    layout_box: tuple = (0.0, 0.0, 1.0, 1.0)

    def __post_init__(self):
        if self.labels is None:
            if self.n_regions > len(DEFAULT_LABELS):
                self.labels = tuple(f"region_{i:02d}" for i in range(self.n_regions))
            else:
                self.labels = DEFAULT_LABELS[: self.n_regions]
        self.labels = tuple(str(l) for l in self.labels)
        self.canvas = tuple(int(c) for c in self.canvas)
        self.intensity_range = tuple(float(v) for v in self.intensity_range)
        self.size_range = tuple(float(v) for v in self.size_range)
        self.shapes = tuple(self.shapes)
        self.layout_box = tuple(float(v) for v in self.layout_box)
        if self.n_regions != len(self.labels) or len(set(self.labels)) != len(self.labels):
            raise ValidationError("n_regions must equal the number of distinct labels")
        if self.n_regions < 1:
            raise ValidationError("at least one region is required")
        if self.position_noise < 0 or self.scale_noise < 0:
            raise ValidationError("noise levels must be nonnegative")
        if min(self.canvas) < 32:
            raise ValidationError(f"canvas must be at least 32x32, got {self.canvas}")
        lo, hi = self.intensity_range
        if not 0.0 < lo < hi <= 1.0:
            raise ValidationError(f"bad intensity range {self.intensity_range}")
        if not 0.0 <= self.mirror_prob <= 1.0:
            raise ValidationError("mirror_prob must lie in [0, 1]")
        x0, y0, x1, y1 = self.layout_box
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValidationError(f"bad layout box {self.layout_box}")
        if any(s not in SHAPES for s in self.shapes):
            raise ValidationError(f"unknown shape in {self.shapes}")

    @classmethod
    def crowded(cls, **overrides):
        """Small regions packed into the central quarter of a 96px canvas."""
        params = dict(canvas=(96, 96), size_range=(0.03, 0.05), layout_box=(0.25, 0.25, 0.75, 0.75))
        params.update(overrides)
        return cls(**params)

    def to_dict(self):
        d = asdict(self)
        d["labels"] = list(self.labels)
        for key in ("canvas", "intensity_range", "size_range", "shapes", "layout_box"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, data):
        data = {k: v for k, v in data.items() if k != "schema_version"}
        try:
            return cls(**data)
        except TypeError as exc:
            raise ValidationError(f"bad scene config: {exc}") from exc


@dataclass(frozen=True)
class RegionSpec:
    shape: str
    cx: float
    cy: float
    rx: float
    ry: float
    vertical: bool = False
    phase: float = 0.0

    def scaled(self, dx, dy, s):
        return RegionSpec(self.shape, self.cx + dx, self.cy + dy, self.rx * s, self.ry * s, self.vertical, self.phase)


def rasterize(spec: RegionSpec, canvas) -> np.ndarray:
    """Boolean (height, width) mask sampled at pixel centers."""
    w, h = canvas
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    X, Y = np.meshgrid(xs, ys)
    dx, dy = X - spec.cx, Y - spec.cy
    if spec.shape == "ellipse":
        return (dx / spec.rx) ** 2 + (dy / spec.ry) ** 2 <= 1.0
    if spec.shape == "rect":
        return (np.abs(dx) <= spec.rx) & (np.abs(dy) <= spec.ry)
    # ribbon: a thin sinusoidal band, at least two pixels thick
    along, across = (dy, dx) if spec.vertical else (dx, dy)
    length, amp = (spec.ry, spec.rx) if spec.vertical else (spec.rx, spec.ry)
    half_thick = max(1.1 / min(w, h), 0.25 * amp)
    centerline = (amp - half_thick) * np.sin(np.pi * along / length + spec.phase)
    return (np.abs(along) <= length) & (np.abs(across - centerline) <= half_thick)


def _inside(spec: RegionSpec):
    return (spec.cx - spec.rx > 0.0 and spec.cx + spec.rx < 1.0
            and spec.cy - spec.ry > 0.0 and spec.cy + spec.ry < 1.0)


@dataclass
class ScenePair:
    reference: Template
    reference_image: np.ndarray
    target_image: np.ndarray
    target_regions: dict  # label -> Mask, hidden from the labeler
    mirrored: bool
    provenance: dict
    config: SceneConfig
    reference_specs: dict = field(default_factory=dict)

    @property
    def labels(self):
        return list(self.config.labels)

    def target_box(self, label) -> BBox:
        return self.target_regions[label].bbox()

    def hidden_regions(self, order_seed=None):
        """Target masks without labels, plus the (hidden) true label list.

        The order is the label order, shuffled when ``order_seed`` is given.
        """
        labels = list(self.config.labels)
        if order_seed is not None:
            rng_for(order_seed, "hide").shuffle(labels)
        return [self.target_regions[l] for l in labels], labels


def intensity_levels(cfg: SceneConfig) -> np.ndarray:
    """The grey levels regions are drawn from, quantized to 8 bits."""
    lo, hi = cfg.intensity_range
    n_levels = max(cfg.n_regions, int(math.floor((hi - lo) / cfg.min_intensity_gap)) + 1)
    return np.round(np.linspace(lo, hi, n_levels) * 255.0) / 255.0


def _intensities(cfg: SceneConfig, rng):
    return rng.choice(intensity_levels(cfg), size=cfg.n_regions, replace=False)


def _place(spec_fn, canvas, occupied, rng, attempts):
    grow = np.ones((3, 3), dtype=bool)
    for _ in range(attempts):
        spec = spec_fn(rng)
        if not _inside(spec):
            continue
        mask = rasterize(spec, canvas)
        if not mask.any():
            continue
        if occupied is not None and np.any(ndimage.binary_dilation(mask, grow) & occupied):
            continue
        return spec, mask
    return None


def _layout(labels, spec_fns, canvas, rng, what, rounds=20):
    """Place every region without overlap, restarting the whole layout when one
    region runs out of local attempts; ``rounds * per_region`` = MAX_ATTEMPTS."""
    per_region = MAX_ATTEMPTS // rounds
    w, h = canvas
    for _ in range(rounds):
        occupied = np.zeros((h, w), dtype=bool)
        specs, masks = {}, {}
        for label in labels:
            placed = _place(spec_fns[label], canvas, occupied, rng, per_region)
            if placed is None:
                break
            specs[label], masks[label] = placed
            occupied |= masks[label]
        else:
            return specs, masks
    raise PlacementError(
        f"could not place {what} regions after {MAX_ATTEMPTS} attempts; try fewer regions"
    )


def generate_scene_pair(cfg: SceneConfig) -> ScenePair:
    """Reference scene with non-overlapping regions plus a jittered target.

    Deterministic in ``cfg.seed``. Regions keep a one-pixel gap so they
    remain separate connected components.
    """
    w, h = cfg.canvas
    rng = rng_for(cfg.seed, "scene")
    lo_size, hi_size = cfg.size_range
    intensities = dict(zip(cfg.labels, _intensities(cfg, rng)))

    def draw(r):
        shape = cfg.shapes[int(r.integers(len(cfg.shapes)))]
        rx, ry = r.uniform(lo_size, hi_size, size=2)
        vertical = False
        if shape == "ribbon":
            vertical = bool(r.integers(2))
            rx, ry = (0.6 * rx, 1.6 * ry) if vertical else (1.6 * rx, 0.6 * ry)
        x0, y0, x1, y1 = cfg.layout_box
        cx, cy = r.uniform(x0, x1), r.uniform(y0, y1)
        return RegionSpec(shape, cx, cy, rx, ry, vertical, float(r.uniform(0, 2 * np.pi)))

    specs, ref_masks = _layout(cfg.labels, {l: draw for l in cfg.labels}, cfg.canvas, rng, "reference")

    jitters = {}

    def perturber(label):
        base = specs[label]

        def perturb(r):
            dx, dy = r.normal(0.0, cfg.position_noise, size=2) if cfg.position_noise else (0.0, 0.0)
            s = max(0.5, 1.0 + r.normal(0.0, cfg.scale_noise)) if cfg.scale_noise else 1.0
            jitters[label] = {"dx": float(dx), "dy": float(dy), "scale": float(s)}
            return base.scaled(dx, dy, s)
        return perturb

    _, tgt_masks = _layout(cfg.labels, {l: perturber(l) for l in cfg.labels}, cfg.canvas, rng, "target")

    mirrored = bool(rng.random() < cfg.mirror_prob) if cfg.mirror_prob > 0 else False
    if mirrored:
        tgt_masks = {k: m[:, ::-1].copy() for k, m in tgt_masks.items()}
    ref_img = np.zeros((h, w))
    tgt_img = np.zeros((h, w))
    for label in cfg.labels:
        ref_img[ref_masks[label]] = intensities[label]
        tgt_img[tgt_masks[label]] = intensities[label]
    provenance = {l: dict(jitters[l], mirrored=mirrored) for l in cfg.labels}

    regions = {}
    for label in cfg.labels:
        m = Mask(ref_masks[label].astype(np.float64))
        regions[label] = (m.bbox(), m)
    name = f"scene-{cfg.seed:06d}"
    template = Template(name, extract_features(ref_img), regions, f"mem://{name}")
    return ScenePair(
        reference=template,
        reference_image=ref_img,
        target_image=tgt_img,
        target_regions={k: Mask(v.astype(np.float64)) for k, v in tgt_masks.items()},
        mirrored=mirrored,
        provenance=provenance,
        config=cfg,
        reference_specs=specs,
    )


# -- retrieval features ----------------------------------------------------

def _pool(image, g):
    h, w = image.shape
    rows = np.linspace(0, h, g + 1).astype(int)
    cols = np.linspace(0, w, g + 1).astype(int)
    out = np.empty((g, g))
    for i in range(g):
        for j in range(g):
            out[i, j] = image[rows[i]:rows[i + 1], cols[j]:cols[j + 1]].mean()
    return out.ravel()


def extract_features(image, dim=64) -> np.ndarray:
    """Pooled-intensity grid plus an intensity histogram, L2-normalized.

    The grid side is ``isqrt(dim - dim // 4)``; remaining slots hold the
    histogram of nonzero intensities over (0, 1].
    """
    image = np.asarray(image, dtype=np.float64)
    if dim < 16:
        raise ValidationError(f"feature dim must be at least 16, got {dim}")
    if image.ndim != 2 or image.size == 0:
        raise ValidationError("image must be a non-empty 2-D array")
    if np.ptp(image) == 0:
        raise ValidationError("blank image: zero intensity variance")
    g = math.isqrt(dim - dim // 4)
    n_hist = dim - g * g
    pooled = _pool(image, g)
    fg = image[image > 0]
    hist = np.histogram(fg, bins=n_hist, range=(0.0, 1.0))[0].astype(np.float64)
    hist = hist / max(image.size, 1) * 4.0
    vec = np.concatenate([pooled, hist])
    return vec / np.linalg.norm(vec)


# -- per-pixel feature grid (stand-in for a segmentation encoder) -----------

@dataclass(frozen=True)
class GridSpec:
    dim: int = 64
    n_centers: int = 32
    width: float = 0.025
    gain: float = 3.0
    seed: int = 0


@lru_cache(maxsize=8)
def _grid_basis(spec: GridSpec):
    rng = rng_for(spec.seed, "feature-grid")
    raw = rng.normal(size=(spec.dim, spec.n_centers))
    if spec.dim >= spec.n_centers:
        q, _ = np.linalg.qr(raw)
        basis = q[:, : spec.n_centers]
    else:
        basis = raw / np.sqrt(spec.dim)
    basis.setflags(write=False)
    return basis


def intensity_code(values, n_centers=32, width=0.025):
    centers = np.linspace(0.0, 1.0, n_centers)
    v = np.asarray(values, dtype=np.float64)[..., None]
    return np.exp(-((v - centers) ** 2) / (2.0 * width ** 2))


def feature_grid(image, spec: GridSpec = GridSpec()) -> np.ndarray:
    """(height, width, dim) per-pixel features: a rotated intensity code."""
    code = intensity_code(image, spec.n_centers, spec.width)
    return spec.gain * code @ _grid_basis(spec).T


# -- relational labeler ----------------------------------------------------

def region_centers(masks: Sequence[Mask]) -> np.ndarray:
    return np.array([m.bbox().center for m in masks], dtype=np.float64)


def region_intensity(image, mask: Mask) -> float:
    sel = mask.values > 0.5
    return float(image[sel].mean()) if sel.any() else 0.0


@lru_cache(maxsize=None)
def _permutations(n):
    """All bijections of ``n`` items plus, per region pair (i < j), the flat
    index ``perm[i] * n + perm[j]`` used to gather reference offsets."""
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp).reshape(-1, n)
    iu, ju = np.triu_indices(n, k=1)
    flat = perms[:, iu] * n + perms[:, ju]
    perms.setflags(write=False)
    flat.setflags(write=False)
    return perms, flat


def offset_distortion(target_centers, reference_centers, target_app=None, reference_app=None, w_app=0.0):
    """Distortion of every bijection target k -> reference perms[p, k].

    Sum over region pairs of the L2 gap between target and reference center
    offsets, plus ``w_app`` times the summed appearance mismatch. Returns
    ``(perms, cost)``.
    """
    n = len(target_centers)
    perms, flat = _permutations(n)
    iu, ju = np.triu_indices(n, k=1)
    t_off = target_centers[ju] - target_centers[iu]  # (pairs, 2)
    r_off = (reference_centers[None, :, :] - reference_centers[:, None, :]).reshape(n * n, 2)
    gap = r_off[None, :, :] - t_off[:, None, :]  # (pairs, n*n, 2)
    table = np.sqrt(gap[..., 0] ** 2 + gap[..., 1] ** 2)
    if len(iu):
        cost = table[np.arange(len(iu))[None, :], flat].sum(axis=1)
    else:
        cost = np.zeros(len(perms))
    if w_app and target_app is not None:
        cost = cost + w_app * np.abs(reference_app[perms] - target_app[None]).sum(axis=1)
    return perms, cost


@dataclass
class LabelingResult:
    labels: list  # per detected region; None when unassigned
    mirrored: bool
    distortion: float
    method: str


def _label_once(t_c, r_c, t_app, r_app, w_app, match_cfg):
    n, m = len(t_c), len(r_c)
    if n == m and n <= MAX_ENUMERATION:
        perms, cost = offset_distortion(t_c, r_c, t_app, r_app, w_app)
        best = int(np.argmin(cost))
        return {k: int(perms[best, k]) for k in range(n)}, float(cost[best]), "enumeration"
    # star-graph approximation: offsets relative to each layout's centroid
    t_rel = t_c - t_c.mean(axis=0)
    r_rel = r_c - r_c.mean(axis=0)
    C = np.linalg.norm(t_rel[:, None, :] - r_rel[None, :, :], axis=2)
    C = C + w_app * np.abs(t_app[:, None] - r_app[None, :])
    assignment = match_cost(C, match_cfg)
    mapping = {p: l for p, l in assignment.pairs}
    return mapping, float(sum(C[p, l] for p, l in assignment.pairs)), "transport"


def label_regions(reference: Template, reference_image, target_image, regions: Sequence[Mask],
                  mirror_test=True, w_app=0.01, match_config: Optional[MatchConfig] = None) -> LabelingResult:
    """Transfer reference labels to detected target regions by spatial relations.

    The mirrored hypothesis (target centers flipped in x) replaces the direct
    one only when its distortion is strictly lower.
    """
    labels = reference.labels
    if not regions:
        return LabelingResult([], False, 0.0, "empty")
    r_masks = [reference.mask(l) for l in labels]
    r_c = region_centers(r_masks)
    r_app = np.array([region_intensity(reference_image, m) for m in r_masks])
    t_c = region_centers(regions)
    t_app = np.array([region_intensity(target_image, m) for m in regions])
    cfg = match_config or MatchConfig(tau_cost_percentile=None, tau_conf=0.0)

    mapping, cost, method = _label_once(t_c, r_c, t_app, r_app, w_app, cfg)
    mirrored = False
    if mirror_test:
        flipped = t_c.copy()
        flipped[:, 0] = 1.0 - flipped[:, 0]
        m_map, m_cost, m_method = _label_once(flipped, r_c, t_app, r_app, w_app, cfg)
        if m_cost < cost:
            mapping, cost, method, mirrored = m_map, m_cost, m_method, True
    out = [labels[mapping[k]] if k in mapping else None for k in range(len(regions))]
    return LabelingResult(out, mirrored, cost, method)


def relational_label(pair: ScenePair, regions: Sequence[Mask], **kwargs) -> dict:
    """Map region index -> label using only the pair's reference annotations."""
    result = label_regions(pair.reference, pair.reference_image, pair.target_image, regions, **kwargs)
    return dict(enumerate(result.labels))


def detect_components(image, min_pixels=2):
    """8-connected foreground components in raster order of their first pixel."""
    labeled, n = ndimage.label(np.asarray(image) > 0, structure=np.ones((3, 3)))
    masks = []
    for i in range(1, n + 1):
        m = labeled == i
        if m.sum() >= min_pixels:
            masks.append(Mask(m.astype(np.float64)))
    return masks


# -- <Seg> embedding stand-in ----------------------------------------------

DESCRIPTOR_CODE = 32
DESCRIPTOR_DIM = 6 + DESCRIPTOR_CODE


def region_descriptor(image, mask: Mask) -> np.ndarray:
    box = mask.bbox()
    cx, cy = box.center
    area = float(mask.values.sum()) / mask.values.size
    level = region_intensity(image, mask)
    code = intensity_code([level], n_centers=DESCRIPTOR_CODE, width=0.025)[0]
    # centered so embeddings of unrelated regions are not dominated by a shared offset
    return np.concatenate([[cx - 0.5, cy - 0.5, box.w, box.h, math.sqrt(area), level - 0.5], code])


@lru_cache(maxsize=8)
def _embedding_map(d_vlm, seed):
    rng = rng_for(seed, "seg-embedding")
    mat = rng.normal(size=(d_vlm, 2 * DESCRIPTOR_DIM)) / math.sqrt(2 * DESCRIPTOR_DIM)
    mat.setflags(write=False)
    return mat


def seg_embedding(target_image, target_mask: Mask, reference_image, reference_mask: Mask, d_vlm=128, seed=0):
    """Fixed random linear map of (target descriptor, reference descriptor)."""
    desc = np.concatenate([
        region_descriptor(target_image, target_mask),
        region_descriptor(reference_image, reference_mask),
    ])
    return _embedding_map(d_vlm, seed) @ desc


def make_seg_embedding(pair: ScenePair, label, d_vlm=128, target_mask: Optional[Mask] = None, seed=0) -> np.ndarray:
    """Seg embedding of ``label`` in ``pair``.

    ``target_mask`` defaults to the true target region of ``label``; the
    pipeline passes the region chosen by the labeler instead.
    """
    if label not in pair.reference.regions:
        raise ValidationError(f"unknown label {label!r}")
    if target_mask is None:
        target_mask = pair.target_regions[label]
    return seg_embedding(pair.target_image, target_mask, pair.reference_image, pair.reference.mask(label), d_vlm, seed)
