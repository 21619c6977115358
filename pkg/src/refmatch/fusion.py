"""Seg-token projection, memory-slot attention and a linear mask decoder.

Shapes: a seg embedding ``h`` has ``d_vlm`` entries, projected queries and
memory slots have ``d`` entries, a feature grid is ``(height, width, d)``.
Layer weights are stored ``(in, out)`` so a layer computes ``x @ w + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, ValidationError
from .geometry import BBox, Mask
from .retrieval import Template
from .rng import rng_for

MIN_BOX_SIZE = 1e-3


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class AdapterMLP:
    """ReLU between layers, identity at the output."""

    weights: list
    biases: list
    decoder_bias: float = 0.0

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValidationError("adapter needs matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} do not chain")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise DimensionError(f"layer {i} input {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {i} has non-finite parameters")
        self.decoder_bias = float(self.decoder_bias)

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @classmethod
    def init(cls, dims=(128, 256, 64), seed=0, decoder_bias=0.0, out_scale=1.0):
        """He-normal layers; ``out_scale`` shrinks the output layer."""
        rng = rng_for(seed, "adapter-init")
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)))
            biases.append(np.zeros(d_out))
        weights[-1] *= out_scale
        return cls(weights, biases, decoder_bias)

    @classmethod
    def zeros(cls, dims):
        return cls([np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])], [np.zeros(b) for b in dims[1:]])

    def copy(self):
        return AdapterMLP([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.decoder_bias)

    def forward(self, h, keep=False):
        """Output vector; with ``keep`` also the per-layer inputs and pre-activations."""
        x = np.asarray(h, dtype=np.float64)
        if x.shape != (self.dims[0],):
            raise DimensionError(f"adapter expects input dim {self.dims[0]}, got {x.shape}")
        inputs, pre = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(x)
            z = x @ w + b
            pre.append(z)
            x = z if i == last else np.maximum(z, 0.0)
        return (x, inputs, pre) if keep else x

    # flat parameter view, used by the optimizer and gradient checks
    def flat(self):
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        parts.append(np.array([self.decoder_bias]))
        return np.concatenate(parts)

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = vec[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = vec[pos:pos + b.size].copy()
            pos += b.size
        self.decoder_bias = float(vec[pos])
        return self

    def to_dict(self):
        return {
            "dims": self.dims,
            "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(self.weights, self.biases)],
            "decoder_bias": self.decoder_bias,
        }

    @classmethod
    def from_dict(cls, data):
        try:
            mlp = cls([l["w"] for l in data["layers"]], [l["b"] for l in data["layers"]], data.get("decoder_bias", 0.0))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed adapter parameters: {exc!r}") from exc
        if "dims" in data and list(data["dims"]) != mlp.dims:
            raise DimensionError(f"declared dims {data['dims']} do not match layers {mlp.dims}")
        return mlp


def save_adapter(mlp: AdapterMLP, path):
    Path(path).write_text(json.dumps(mlp.to_dict()) + "\n", encoding="utf-8")


def load_adapter(path) -> AdapterMLP:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", offset=len(text[: exc.pos].encode("utf-8")), path=path) from exc
    return AdapterMLP.from_dict(data)


def project(h, mlp: AdapterMLP) -> np.ndarray:
    """Seg embedding -> memory-space query."""
    return mlp.forward(h)


def regress_box(h, mlp: AdapterMLP) -> BBox:
    """Box head: logistic squash of four raw outputs, then clipped to the unit square."""
    raw = mlp.forward(h)
    if raw.shape != (4,):
        raise DimensionError(f"box head must output 4 values, got {raw.shape}")
    x, y, w, h_ = sigmoid(raw)
    w = min(max(w, MIN_BOX_SIZE), 1.0)
    h_ = min(max(h_, MIN_BOX_SIZE), 1.0)
    x = min(x, 1.0 - w)
    y = min(y, 1.0 - h_)
    return BBox(float(x), float(y), float(w), float(h_))


@dataclass
class MemoryBank:
    slots: np.ndarray  # (n_slots, d)
    provenance: list = field(default_factory=list)  # (template id, label) per slot

    def __post_init__(self):
        slots = np.asarray(self.slots, dtype=np.float64)
        self.slots = slots.reshape(0, 0) if slots.size == 0 and slots.ndim < 2 else np.atleast_2d(slots)
        if self.slots.shape[0] and not np.all(np.isfinite(self.slots)):
            raise ValidationError("memory slots must be finite")

    def __len__(self):
        return self.slots.shape[0]

    @property
    def labels(self):
        return [label for _, label in self.provenance]


def build_memory_slots(template: Template, grid) -> MemoryBank:
    """One slot per labeled region: mean grid feature over the region's pixels,
    in label sort order."""
    grid = np.asarray(grid, dtype=np.float64)
    slots, prov = [], []
    for label in template.labels:
        mask = template.mask(label)
        if mask.shape != grid.shape[:2]:
            raise DimensionError(f"grid {grid.shape[:2]} does not match mask {mask.shape} of {label!r}")
        weights = mask.values
        total = weights.sum()
        if total <= 0:
            raise ValidationError(f"region {label!r} has an empty mask")
        slots.append(np.tensordot(weights, grid, axes=([0, 1], [0, 1])) / total)
        prov.append((template.id, label))
    return MemoryBank(np.array(slots), prov)


@dataclass
class FusedQuery:
    q: np.ndarray
    alpha: np.ndarray
    z: np.ndarray


def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max())
    return e / e.sum()


def attend_memory(q, bank: MemoryBank) -> FusedQuery:
    """Dot-product attention of one query over all memory slots."""
    if len(bank) == 0:
        raise ValidationError("memory bank is empty")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (bank.slots.shape[1],):
        raise DimensionError(f"query dim {q.shape} does not match slot dim {bank.slots.shape[1]}")
    alpha = softmax(bank.slots @ q)
    return FusedQuery(q, alpha, alpha @ bank.slots)


def decode_logits(z, grid, bias):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[2] != np.shape(z)[0]:
        raise DimensionError(f"grid {grid.shape} does not match fused dim {np.shape(z)}")
    return grid @ z + bias


def decode_mask(z, grid, bias=0.0) -> Mask:
    """Soft mask: logistic of per-pixel dot product with ``z`` plus ``bias``."""
    return Mask(sigmoid(decode_logits(z, grid, bias)))


def segment(h, mlp: AdapterMLP, bank: MemoryBank, grid) -> Mask:
    fused = attend_memory(project(h, mlp), bank)
    return decode_mask(fused.z, grid, mlp.decoder_bias)
