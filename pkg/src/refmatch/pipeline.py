"""End-to-end evaluation: retrieve a reference, detect target regions, label
them, optionally segment, and score against the hidden ground truth."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError
from .fusion import AdapterMLP, attend_memory, build_memory_slots, decode_mask, project
from .geometry import BBox, Mask, SampleResult, aggregate_report, average_precision, box_iou, mask_dice, mask_overlap
from .ot import MatchConfig, Prototype, build_cost, independent_assignment, match_cost, match_with_refinement
from .retrieval import ReferenceBank, Template, retrieve
from .rewards import (RewardConfig, detection_reward, format_answer, parse_format, segmentation_reward,
                      vqa_reward)
from .rng import rng_for
from .scenes import ImageStore, Scene
from .synth import GridSpec, detect_components, extract_features, feature_grid, label_regions, seg_embedding

MODES = ("vqa", "bbox", "seg")
DETECTORS = ("gt", "components")


class StageError(ValidationError):
    """A module error tagged with the pipeline stage and scene it came from."""

    def __init__(self, stage, scene_id, cause):
        super().__init__(f"[{stage}] scene {scene_id}: {cause}")
        self.stage = stage
        self.scene_id = scene_id


@dataclass
class PipelineConfig:
    mode: str = "vqa"
    use_ot: bool = True
    detector: str = "gt"
    mirror_test: bool = True
    regenerate: bool = True
    retrieval: str = "bank"  # or "paired": use the scene's own reference
    d_vlm: int = 128
    ap_thresholds: tuple = (0.5,)
    giou_mode: str = "per_sample"
    reward_step: int = 0
    order_seed: int = 0
    match: MatchConfig = field(default_factory=MatchConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.detector not in DETECTORS:
            raise ValidationError(f"detector must be one of {DETECTORS}, got {self.detector!r}")
        if self.retrieval not in ("bank", "paired"):
            raise ValidationError(f"retrieval must be 'bank' or 'paired', got {self.retrieval!r}")
        self.ap_thresholds = tuple(self.ap_thresholds)
        if isinstance(self.match, dict):
            self.match = MatchConfig(**self.match)
        if isinstance(self.reward, dict):
            self.reward = RewardConfig(**self.reward)
        if isinstance(self.grid, dict):
            self.grid = GridSpec(**self.grid)

    def to_dict(self):
        out = asdict(self)
        out["ap_thresholds"] = list(self.ap_thresholds)
        return out


@dataclass
class SceneOutcome:
    scene_id: str
    samples: list
    rewards: list
    artifacts: dict


# -- stages ------------------------------------------------------------------

def retrieve_reference(bank: ReferenceBank, target_image, mirror_aware=True):
    """Best template for ``target_image``; with ``mirror_aware`` the flipped
    target is queried too and the higher similarity wins (ties keep the
    unflipped query)."""
    feat = extract_features(target_image, bank.dim)
    best, sim = retrieve(bank, feat, k=1)[0]
    flipped = False
    if mirror_aware:
        f_best, f_sim = retrieve(bank, extract_features(np.asarray(target_image)[:, ::-1], bank.dim), k=1)[0]
        if f_sim > sim:
            best, sim, flipped = f_best, f_sim, True
    return best, sim, flipped


def detect(scene: Scene, detector: str, order_seed=0):
    """Detected target masks and, for scoring only, their gold labels
    (None for a detection matching no true region)."""
    if detector == "gt":
        labels = sorted(scene.truth)
        rng_for(order_seed, "hide", scene.id).shuffle(labels)
        return [scene.truth[l] for l in labels], labels
    masks = detect_components(scene.target_image)
    gold = []
    truth_labels = sorted(scene.truth)
    if masks:
        iou = np.array([[_mask_iou(m, scene.truth[l]) for l in truth_labels] for m in masks])
        rows, cols = linear_sum_assignment(-iou)
        owner = {int(r): truth_labels[c] for r, c in zip(rows, cols) if iou[r, c] >= 0.5}
        gold = [owner.get(i) for i in range(len(masks))]
    return masks, gold


def _mask_iou(a: Mask, b: Mask):
    inter, union = mask_overlap(a, b)
    return inter / union if union > 0 else 0.0


def _mirror_choice(preds, prototypes, w):
    """True when x-mirrored boxes admit a strictly cheaper perfect matching."""
    def best(boxes):
        C = build_cost(boxes, prototypes, w)
        r, c = linear_sum_assignment(C)
        return float(C[r, c].sum())
    return best([b.mirrored() for b in preds]) < best(preds)


def label_by_boxes(template: Template, masks: Sequence[Mask], cfg: PipelineConfig, fallback: Sequence[BBox] = ()):
    """Box-level labeling: OT global matching (or the independent baseline)
    between detected boxes and the template's label boxes.

    ``fallback`` boxes (for instance connected components of the target) are
    offered to labels the matcher leaves open; an adopted box counts for the
    detection it overlaps most.
    """
    labels = template.labels
    prototypes = [Prototype(box=template.box(l), label=l) for l in labels]
    boxes = [m.bbox() for m in masks]
    w = (cfg.match.w_spatial, cfg.match.w_semantic)
    mirrored = bool(cfg.mirror_test and _mirror_choice(boxes, prototypes, w))
    query = [b.mirrored() for b in boxes] if mirrored else boxes
    spare = [b.mirrored() for b in fallback] if mirrored else list(fallback)

    if not cfg.use_ot:
        assignment = independent_assignment(build_cost(query, prototypes, w))
    elif cfg.regenerate and spare:
        assignment = match_with_refinement(query, prototypes, cfg.match, lambda region: spare)
    else:
        assignment = match_with_refinement(query, prototypes, cfg.match)

    per_region = [None] * len(masks)
    confidence = [0.0] * len(masks)
    for (p, j), c in zip(assignment.pairs, assignment.confidences):
        if p >= len(query):
            box = assignment.recovered_boxes[p - len(query)]
            overlaps = [box_iou(box, q) for q in query]
            p = int(np.argmax(overlaps))
            if overlaps[p] < 0.5 or per_region[p] is not None:
                continue
        if per_region[p] is None or c > confidence[p]:
            per_region[p], confidence[p] = labels[j], c
    return per_region, confidence, mirrored, assignment


# -- per-scene run -----------------------------------------------------------

def run_scene(scene: Scene, bank: Optional[ReferenceBank], images: ImageStore, cfg: PipelineConfig,
              adapter: Optional[AdapterMLP] = None) -> SceneOutcome:
    stage = "retrieve"
    try:
        if cfg.retrieval == "paired":
            template, sim, flipped = scene.reference, 1.0, False
            ref_image = scene.reference_image
        else:
            template, sim, flipped = retrieve_reference(bank, scene.target_image, cfg.mirror_test)
            ref_image = images.reference_image(template)
        art = {"retrieval": {"template": template.id, "similarity": sim, "flipped_query": flipped}}

        stage = "detect"
        masks, gold = detect(scene, cfg.detector, cfg.order_seed)
        art["detector"] = cfg.detector
        art["detections"] = [m.bbox().as_list() for m in masks]

        stage = "label"
        if cfg.mode == "bbox":
            fallback = [m.bbox() for m in detect_components(scene.target_image)] if cfg.regenerate else []
            predicted, confidence, mirrored, assignment = label_by_boxes(template, masks, cfg, fallback)
            art["assignment"] = assignment.to_dict(template.labels)
            art["matcher"] = "ot" if cfg.use_ot else "independent"
        else:
            result = label_regions(template, ref_image, scene.target_image, masks, mirror_test=cfg.mirror_test)
            predicted, mirrored = result.labels, result.mirrored
            confidence = [1.0 if l is not None else 0.0 for l in predicted]
            art["labeling"] = {"method": result.method, "distortion": result.distortion}
        art["mirrored_hypothesis"] = bool(mirrored)
        art["labels"] = predicted

        stage = "score"
        samples, rewards = _score(scene, template, ref_image, masks, gold, predicted, confidence, cfg, adapter, art)
    except ValidationError as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(stage, scene.id, exc) from exc
    return SceneOutcome(scene.id, samples, rewards, art)


def _score(scene, template, ref_image, masks, gold, predicted, confidence, cfg, adapter, art):
    truth_labels = sorted(scene.truth)
    region_of_gold = {g: i for i, g in enumerate(gold) if g is not None}
    region_of_pred = {}
    for i, l in enumerate(predicted):
        if l is not None and (l not in region_of_pred or confidence[i] > confidence[region_of_pred[l]]):
            region_of_pred[l] = i

    samples, rewards = [], []
    if cfg.mode == "vqa":
        for label in truth_labels:
            i = region_of_gold.get(label)
            answer = format_answer(predicted[i]) if i is not None and predicted[i] is not None else "<answer></answer>"
            valid, parsed = parse_format(answer, template.labels)
            samples.append(SampleResult(label, correct=parsed == label and i is not None))
            r = vqa_reward(parsed, label, valid, cfg.reward)
            rewards.append(dict(scene=scene.id, label=label, answer=answer, **r.to_dict()))
        return samples, rewards

    if cfg.mode == "bbox":
        preds = [(masks[i].bbox(), confidence[i], l) for i, l in enumerate(predicted) if l is not None]
        gts = [(scene.truth[l].bbox(), l) for l in truth_labels]
        for label in truth_labels:
            i = region_of_gold.get(label)
            j = region_of_pred.get(label)
            iou = box_iou(masks[j].bbox(), scene.truth[label].bbox()) if j is not None else 0.0
            ap = average_precision([p for p in preds if p[2] == label], [g for g in gts if g[1] == label],
                                   cfg.ap_thresholds)
            samples.append(SampleResult(label, correct=i is not None and predicted[i] == label, box_iou=iou, ap=ap))
        r = detection_reward(preds, gts, True, cfg.reward_step, cfg.reward)
        rewards.append(dict(scene=scene.id, **r.to_dict()))
        return samples, rewards

    # seg
    if adapter is None:
        raise ValidationError("seg mode needs adapter parameters")
    ref_grid = feature_grid(ref_image, cfg.grid)
    tgt_grid = feature_grid(scene.target_image, cfg.grid)
    memory = build_memory_slots(template, ref_grid)
    seg_art = {}
    for label in truth_labels:
        i = region_of_gold.get(label)
        j = region_of_pred.get(label)
        gt = scene.truth[label]
        if j is None or label not in template.regions:
            pred = Mask(np.zeros(gt.shape))
        else:
            h = seg_embedding(scene.target_image, masks[j], ref_image, template.mask(label), cfg.d_vlm, cfg.grid.seed)
            fused = attend_memory(project(h, adapter), memory)
            pred = decode_mask(fused.z, tgt_grid, adapter.decoder_bias)
            seg_art[label] = {"alpha": [float(a) for a in fused.alpha]}
        binary = pred.binarize()
        inter, union = mask_overlap(binary, gt)
        samples.append(SampleResult(label, correct=i is not None and predicted[i] == label,
                                    dice=mask_dice(binary, gt), mask_inter=inter, mask_union=union))
        r = segmentation_reward(pred, gt, cfg.reward)
        rewards.append(dict(scene=scene.id, label=label, **r.to_dict()))
    art["attention"] = seg_art
    return samples, rewards


def run_pipeline(scenes: Sequence[Scene], bank: Optional[ReferenceBank], cfg: PipelineConfig,
                 adapter: Optional[AdapterMLP] = None, images: Optional[ImageStore] = None, workers=1):
    """Run every scene and fold the samples into one report.

    Outcomes come back in scene order whatever ``workers`` is.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValidationError("no scenes to evaluate")
    if cfg.retrieval == "bank" and (bank is None or len(bank) == 0):
        raise ValidationError("retrieval needs a non-empty bank")
    images = images or ImageStore.from_scenes(scenes)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda s: run_scene(s, bank, images, cfg, adapter), scenes))
    else:
        outcomes = [run_scene(s, bank, images, cfg, adapter) for s in scenes]
    samples = [s for o in outcomes for s in o.samples]
    return aggregate_report(samples, cfg.giou_mode), outcomes
