"""On-disk scene sets: 8-bit PGM images plus template and ground-truth JSON.

Layout of a scene directory::

    scenes.json                 index: schema_version, scene config, scene ids
    scene-000000/reference.pgm
    scene-000000/target.pgm
    scene-000000/template.json  one bank-format template entry
    scene-000000/truth.json     hidden target regions and perturbation record
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, ValidationError
from .geometry import BBox, Mask
from .retrieval import ReferenceBank, Template, bank_from_dict, bank_to_dict, rle_decode, rle_encode
from .synth import SceneConfig, ScenePair, extract_features

SCHEMA_VERSION = 1
INDEX_NAME = "scenes.json"


# -- portable graymap --------------------------------------------------------

def write_pgm(path, image):
    """Binary 8-bit PGM; values in [0, 1] map to 0..255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValidationError(f"image must be 2-D, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ValidationError("image values must lie in [0, 1]")
    h, w = img.shape
    data = np.round(img * 255.0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if not m:
        raise FormatError("not a binary PGM (P5) file", offset=0, path=path)
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"only 8-bit PGM is supported, maxval={maxval}", offset=m.start(3), path=path)
    body = raw[m.end():]
    if len(body) != w * h:
        raise FormatError(f"expected {w * h} pixel bytes, found {len(body)}", offset=m.end(), path=path)
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# -- scenes ------------------------------------------------------------------

@dataclass
class Scene:
    """A reference template with its image, and a target image whose region
    labels are ground truth for scoring only."""

    id: str
    reference: Template
    reference_image: np.ndarray
    target_image: np.ndarray
    truth: dict  # label -> Mask
    mirrored: bool = False
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_pair(cls, pair: ScenePair):
        return cls(pair.reference.id, pair.reference, pair.reference_image, pair.target_image,
                   dict(pair.target_regions), pair.mirrored, pair.provenance)


def _region_dict(mask: Mask, box: Optional[BBox] = None):
    box = box or mask.bbox()
    return {"bbox": box.as_list(), "mask_rle": rle_encode(mask.values), "mask_w": mask.width, "mask_h": mask.height}


def _region_mask(entry) -> Mask:
    return Mask(rle_decode(entry["mask_rle"], int(entry["mask_w"]), int(entry["mask_h"])))


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def write_scene(scene: Scene, directory):
    d = Path(directory) / scene.id
    d.mkdir(parents=True, exist_ok=True)
    write_pgm(d / "reference.pgm", scene.reference_image)
    write_pgm(d / "target.pgm", scene.target_image)
    template = Template(scene.reference.id, scene.reference.feature, scene.reference.regions,
                        f"{scene.id}/reference.pgm")
    entry = bank_to_dict(ReferenceBank(len(template.feature), [template]))["templates"][0]
    (d / "template.json").write_text(_dump(entry), encoding="utf-8")
    truth = {
        "id": scene.id,
        "mirrored": scene.mirrored,
        "provenance": scene.provenance,
        "regions": {label: _region_dict(scene.truth[label]) for label in sorted(scene.truth)},
    }
    (d / "truth.json").write_text(_dump(truth), encoding="utf-8")


def write_scene_set(scenes, directory, config: Optional[SceneConfig] = None, seeds=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for scene in scenes:
        write_scene(scene, directory)
        ids.append(scene.id)
    index = {"schema_version": SCHEMA_VERSION, "scenes": ids}
    if config is not None:
        index["config"] = config.to_dict()
    if seeds is not None:
        index["seeds"] = list(seeds)
    (directory / INDEX_NAME).write_text(_dump(index), encoding="utf-8")
    return directory / INDEX_NAME


def _load_json(path):
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", offset=len(text[: exc.pos].encode("utf-8")), path=path) from exc


def load_scene(directory, scene_id) -> Scene:
    d = Path(directory) / scene_id
    entry = _load_json(d / "template.json")
    template = bank_from_dict({"dim": len(entry.get("feature", [])) or 1, "templates": [entry]},
                              path=d / "template.json").templates[0]
    truth = _load_json(d / "truth.json")
    try:
        regions = {label: _region_mask(r) for label, r in truth["regions"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed truth file: {exc}", path=d / "truth.json") from exc
    return Scene(scene_id, template, read_pgm(d / "reference.pgm"), read_pgm(d / "target.pgm"),
                 regions, bool(truth.get("mirrored", False)), truth.get("provenance", {}))


def load_index(directory):
    path = Path(directory) / INDEX_NAME
    if not path.exists():
        raise ValidationError(f"no scene index at {path}")
    index = _load_json(path)
    if index.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema_version {index.get('schema_version')!r}", path=path)
    return index


def load_scene_set(directory):
    return [load_scene(directory, sid) for sid in load_index(directory)["scenes"]]


def bank_from_scenes(scenes, dim=64) -> ReferenceBank:
    """Reference bank over the scenes' templates, features recomputed at ``dim``."""
    bank = ReferenceBank(dim)
    for s in scenes:
        t = s.reference
        image_ref = t.image_ref if not t.image_ref.startswith("mem://") else f"{s.id}/reference.pgm"
        bank.add(Template(t.id, extract_features(s.reference_image, dim), dict(t.regions), image_ref))
    return bank


class ImageStore:
    """Resolves template image references: in-memory images first, then files
    relative to ``root``."""

    def __init__(self, root=None, images=None):
        self.root = Path(root) if root is not None else None
        self.images = dict(images or {})

    @classmethod
    def from_scenes(cls, scenes, root=None):
        return cls(root, {s.reference.id: s.reference_image for s in scenes})

    def reference_image(self, template: Template) -> np.ndarray:
        if template.id in self.images:
            return self.images[template.id]
        if self.root is None or not template.image_ref or template.image_ref.startswith("mem://"):
            raise ValidationError(f"no image available for template {template.id!r}")
        img = read_pgm(self.root / template.image_ref)
        self.images[template.id] = img
        return img
