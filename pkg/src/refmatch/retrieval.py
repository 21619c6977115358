"""Reference bank of annotated templates with cosine-similarity retrieval."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import DimensionError, FormatError, ValidationError
from .geometry import BBox, Mask


def as_feature(values, dim=None) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise DimensionError(f"feature must be a non-empty vector, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValidationError("feature values must be finite")
    if dim is not None and vec.size != dim:
        raise DimensionError(f"feature has dim {vec.size}, expected {dim}")
    return vec


@dataclass
class Template:
    id: str
    feature: np.ndarray
    regions: dict  # label -> (BBox, Mask)
    image_ref: str = ""

    @property
    def labels(self):
        return sorted(self.regions)

    def box(self, label) -> BBox:
        return self.regions[label][0]

    def mask(self, label) -> Mask:
        return self.regions[label][1]


@dataclass
class ReferenceBank:
    dim: int = 64
    templates: list = field(default_factory=list)

    def __post_init__(self):
        if self.dim <= 0:
            raise ValidationError(f"bank dim must be positive, got {self.dim}")
        templates, self.templates = self.templates, []
        for t in templates:
            self.add(t)

    def add(self, template: Template):
        template.feature = as_feature(template.feature, self.dim)
        if any(t.id == template.id for t in self.templates):
            raise ValidationError(f"duplicate template id {template.id!r}")
        self.templates.append(template)

    def __len__(self):
        return len(self.templates)

    def __iter__(self):
        return iter(self.templates)

    def get(self, template_id) -> Template:
        for t in self.templates:
            if t.id == template_id:
                return t
        raise KeyError(template_id)


def cosine_similarity(a, b) -> float:
    a, b = as_feature(a), as_feature(b)
    if a.size != b.size:
        raise DimensionError(f"dimension mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValidationError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def retrieve(bank: ReferenceBank, query, k=1, required_labels: Optional[Iterable[str]] = None):
    """Top-``k`` templates by cosine similarity, best first.

    Ties keep bank order. ``required_labels`` restricts the scan to
    templates annotating every listed label.
    """
    if len(bank) == 0:
        raise ValidationError("cannot retrieve from an empty bank")
    query = as_feature(query, bank.dim)
    if np.linalg.norm(query) == 0:
        raise ValidationError("query feature has zero norm")
    pool = bank.templates
    if required_labels is not None:
        need = set(required_labels)
        pool = [t for t in pool if need.issubset(t.regions)]
    if not 1 <= k <= len(pool):
        raise ValidationError(f"k={k} outside 1..{len(pool)}")
    feats = np.stack([t.feature for t in pool])
    norms = np.linalg.norm(feats, axis=1)
    if np.any(norms == 0):
        raise ValidationError("bank contains a zero-norm feature")
    sims = np.clip(feats @ query / (norms * np.linalg.norm(query)), -1.0, 1.0)
    order = np.argsort(-sims, kind="stable")[:k]
    return [(pool[i], float(sims[i])) for i in order]


# -- persistence -----------------------------------------------------------

def rle_encode(values: np.ndarray) -> str:
    """Row-major run-length code: space-separated ``count:value`` pairs."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        return ""
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [flat.size]))
    return " ".join(f"{e - s}:{_num(flat[s])}" for s, e in zip(starts, ends))


def _num(v):
    v = float(v)
    if v == 0.0:
        return "0"
    if v == 1.0:
        return "1"
    return repr(v)


def rle_decode(code: str, width: int, height: int) -> np.ndarray:
    out = np.empty(width * height, dtype=np.float64)
    pos = 0
    for token in code.split():
        count, _, value = token.partition(":")
        n = int(count)
        if n <= 0 or pos + n > out.size:
            raise ValueError(f"run {token!r} overflows a {width}x{height} mask")
        out[pos:pos + n] = float(value)
        pos += n
    if pos != out.size:
        raise ValueError(f"runs cover {pos} of {out.size} pixels")
    return out.reshape(height, width)


def bank_to_dict(bank: ReferenceBank) -> dict:
    templates = []
    for t in bank.templates:
        regions = {}
        for label in sorted(t.regions):
            box, mask = t.regions[label]
            regions[label] = {
                "bbox": box.as_list(),
                "mask_rle": rle_encode(mask.values),
                "mask_w": mask.width,
                "mask_h": mask.height,
            }
        templates.append({
            "id": t.id,
            "feature": [float(v) for v in t.feature],
            "image_ref": t.image_ref,
            "regions": regions,
        })
    return {"dim": bank.dim, "templates": templates}


def dumps_bank(bank: ReferenceBank) -> str:
    return json.dumps(bank_to_dict(bank), separators=(",", ":")) + "\n"


def save_bank(bank: ReferenceBank, path):
    Path(path).write_text(dumps_bank(bank), encoding="utf-8")


def _locate(raw: bytes, needle: str) -> Optional[int]:
    i = raw.find(needle.encode("utf-8"))
    return i if i >= 0 else None


def bank_from_dict(data, raw: bytes = b"", path=None) -> ReferenceBank:
    def fail(msg, needle=None):
        raise FormatError(msg, offset=_locate(raw, needle) if needle else None, path=path)

    if not isinstance(data, dict) or "dim" not in data or "templates" not in data:
        fail("bank document must be an object with 'dim' and 'templates'")
    dim = data["dim"]
    if not isinstance(dim, int) or dim <= 0:
        fail(f"bank dim must be a positive integer, got {dim!r}", '"dim"')
    bank = ReferenceBank(dim)
    for entry in data["templates"]:
        try:
            tid = str(entry["id"])
            feature = as_feature(entry["feature"])
            regions = {}
            for label, reg in entry["regions"].items():
                w, h = int(reg["mask_w"]), int(reg["mask_h"])
                mask = Mask(rle_decode(reg["mask_rle"], w, h))
                regions[label] = (BBox(*map(float, reg["bbox"])), mask)
            template = Template(tid, feature, regions, str(entry.get("image_ref", "")))
        except (KeyError, TypeError, ValueError) as exc:
            ident = entry.get("id") if isinstance(entry, dict) else None
            fail(f"malformed template {ident!r}: {exc}", f'"id":"{ident}"' if ident is not None else None)
        if feature.size != dim:
            raise DimensionError(f"template {tid!r} has feature dim {feature.size}, bank dim is {dim}")
        bank.add(template)
    return bank


def loads_bank(text, path=None) -> ReferenceBank:
    raw = text.encode("utf-8") if isinstance(text, str) else text
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        offset = len(exc.doc[: exc.pos].encode("utf-8")) if isinstance(exc.doc, str) else exc.pos
        raise FormatError(f"invalid JSON: {exc.msg}", offset=offset, path=path) from exc
    except UnicodeDecodeError as exc:
        raise FormatError("bank file is not UTF-8", offset=exc.start, path=path) from exc
    return bank_from_dict(data, raw, path)


def load_bank(path) -> ReferenceBank:
    return loads_bank(Path(path).read_bytes(), path=path)


def templates_equal(a: Template, b: Template) -> bool:
    if a.id != b.id or a.image_ref != b.image_ref or set(a.regions) != set(b.regions):
        return False
    if not np.array_equal(a.feature, b.feature):
        return False
    return all(a.regions[k][0] == b.regions[k][0] and a.regions[k][1] == b.regions[k][1] for k in a.regions)


def banks_equal(a: ReferenceBank, b: ReferenceBank) -> bool:
    return a.dim == b.dim and len(a) == len(b) and all(templates_equal(x, y) for x, y in zip(a, b))

