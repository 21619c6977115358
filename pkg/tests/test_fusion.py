import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from refmatch.errors import DimensionError, FormatError, ValidationError
from refmatch.fusion import (
    AdapterMLP, MemoryBank, attend_memory, build_memory_slots, decode_mask, load_adapter, project, regress_box,
    save_adapter, segment, sigmoid,
)
from refmatch.geometry import BBox, Mask
from refmatch.retrieval import Template

from oracles import mlp_forward


def _template(masks):
    regions = {label: (Mask(m).bbox(), Mask(m)) for label, m in masks.items()}
    return Template("t", np.ones(4), regions)


def test_sigmoid_is_stable():
    v = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert v.tolist() == [0.0, 0.5, 1.0]


def test_project_examples():
    h = np.random.default_rng(0).normal(size=6)
    assert np.all(project(h, AdapterMLP.zeros([6, 8, 3])) == 0.0)
    ident = AdapterMLP([np.eye(6)], [np.zeros(6)])
    assert np.array_equal(project(h, ident), h)
    mlp = AdapterMLP.init([6, 10, 4], seed=42)
    assert np.allclose(project(h, mlp), mlp_forward(mlp.weights, mlp.biases, h), rtol=0, atol=1e-12)
    with pytest.raises(DimensionError):
        project(np.ones(5), mlp)


def test_project_and_regress_box_are_deterministic():
    h = np.random.default_rng(1).normal(size=6)
    a, b = AdapterMLP.init([6, 10, 4], seed=3), AdapterMLP.init([6, 10, 4], seed=3)
    assert project(h, a).tobytes() == project(h, b).tobytes()
    assert regress_box(h, a) == regress_box(h, b)


def test_regress_box_examples():
    h = np.ones(5)
    assert regress_box(h, AdapterMLP.zeros([5, 4])) == BBox(0.5, 0.5, 0.5, 0.5)
    mlp = AdapterMLP.zeros([5, 4])
    mlp.biases[0][:] = [0.0, 0.0, -50.0, 0.0]
    assert regress_box(h, mlp).w == 1e-3
    rnd = AdapterMLP.init([5, 7, 4], seed=9)
    x, y, w, hh = 1 / (1 + np.exp(-mlp_forward(rnd.weights, rnd.biases, h)))
    w, hh = min(max(w, 1e-3), 1.0), min(max(hh, 1e-3), 1.0)
    expected = BBox(min(x, 1 - w), min(y, 1 - hh), w, hh)
    got = regress_box(h, rnd)
    assert got.as_list() == pytest.approx(expected.as_list(), abs=1e-12)
    with pytest.raises(DimensionError):
        regress_box(h, AdapterMLP.zeros([5, 3]))


@given(st.lists(st.floats(-30, 30), min_size=4, max_size=4))
def test_regress_box_always_valid(raw):
    mlp = AdapterMLP.zeros([1, 4])
    mlp.biases[0][:] = raw
    box = regress_box(np.zeros(1), mlp)
    assert box.x + box.w <= 1 + 1e-9 and box.y + box.h <= 1 + 1e-9
    assert box.w >= 1e-3 and box.h >= 1e-3


def test_memory_slot_examples():
    grid = np.zeros((4, 4, 3))
    f = np.array([1.0, -2.0, 0.5])
    grid[:2, :2] = f
    m = np.zeros((4, 4))
    m[:2, :2] = 1
    bank = build_memory_slots(_template({"a": m}), grid)
    assert np.array_equal(bank.slots[0], f)

    other = np.zeros((4, 4))
    other[3, 3] = 1
    bank = build_memory_slots(_template({"zeta": m, "alpha": other}), grid)
    assert bank.labels == ["alpha", "zeta"]
    assert bank.provenance == [("t", "alpha"), ("t", "zeta")]

    yy, xx = np.mgrid[0:5, 0:6]
    gradient = np.stack([xx, yy, xx * yy], axis=-1).astype(float)
    region = np.zeros((5, 6))
    region[1:4, 2:5] = 1
    expected = np.zeros(3)
    count = 0
    for r in range(5):
        for c in range(6):
            if region[r, c]:
                expected += gradient[r, c]
                count += 1
    slot = build_memory_slots(_template({"g": region}), gradient).slots[0]
    assert np.allclose(slot, expected / count, atol=1e-12)


def test_memory_slot_errors():
    m = np.zeros((4, 4))
    m[0, 0] = 1
    with pytest.raises(DimensionError):
        build_memory_slots(_template({"a": m}), np.zeros((3, 4, 2)))
    empty = _template({"a": m})
    empty.regions["ghost"] = (BBox(0, 0, 0.5, 0.5), Mask(np.zeros((4, 4))))
    with pytest.raises(ValidationError, match="ghost"):
        build_memory_slots(empty, np.zeros((4, 4, 2)))


def test_attention_examples():
    slot = np.array([[0.3, -0.4]])
    fq = attend_memory(np.array([5.0, 1.0]), MemoryBank(slot))
    assert fq.alpha.tolist() == [1.0] and np.array_equal(fq.z, slot[0])
    fq = attend_memory(np.array([1.0, 2.0]), MemoryBank(np.array([[1.0, 1.0], [1.0, 1.0]])))
    assert fq.alpha.tolist() == [0.5, 0.5]
    fq = attend_memory(np.array([10.0]), MemoryBank(np.array([[1.0], [0.0]])))
    assert fq.alpha[0] == pytest.approx(1 / (1 + math.exp(-10)), abs=1e-12)
    assert fq.alpha[0] == pytest.approx(0.9999546, abs=1e-7)


def test_attention_errors():
    with pytest.raises(ValidationError):
        attend_memory(np.ones(2), MemoryBank(np.zeros((0, 2))))
    with pytest.raises(ValidationError):
        attend_memory(np.ones(2), MemoryBank([]))
    with pytest.raises(DimensionError):
        attend_memory(np.ones(3), MemoryBank(np.ones((2, 2))))


@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(-50, 50))
def test_attention_properties(seed, n_slots, shift):
    rng = np.random.default_rng(seed)
    slots = rng.normal(size=(n_slots, 3))
    q = rng.normal(size=3) * 3
    fq = attend_memory(q, MemoryBank(slots))
    assert np.all(fq.alpha >= 0)
    assert abs(fq.alpha.sum() - 1.0) < 1e-9
    assert np.all(fq.z >= slots.min(axis=0) - 1e-12)
    assert np.all(fq.z <= slots.max(axis=0) + 1e-12)
    from refmatch.fusion import softmax
    logits = slots @ q
    assert np.allclose(softmax(logits + shift), softmax(logits), atol=1e-12)


def test_decode_examples():
    grid = np.random.default_rng(2).normal(size=(3, 4, 5))
    m = decode_mask(np.zeros(5), grid, bias=-1.3)
    assert np.allclose(m.values, sigmoid(-1.3), atol=0)

    u = np.array([0.6, 0.8])
    g = np.zeros((2, 2, 2))
    g[0, :] = u
    g[1, :] = -u
    m = decode_mask(u, g, 0.0)
    assert np.allclose(m.values[0], sigmoid(1.0)) and np.all(m.values[0] > 0.5)
    assert np.all(m.values[1] < 0.5)

    g = np.zeros((2, 3, 3))
    g[..., :2] = np.random.default_rng(3).normal(size=(2, 3, 2))
    m = decode_mask(np.array([0.0, 0.0, 4.0]), g, 0.7)
    assert np.allclose(m.values, sigmoid(0.7), atol=0)


def test_decode_monotone_in_bias():
    rng = np.random.default_rng(4)
    grid, z = rng.normal(size=(5, 5, 3)), rng.normal(size=3)
    prev = decode_mask(z, grid, -5.0).values
    for bias in np.linspace(-4.0, 5.0, 19):
        cur = decode_mask(z, grid, bias).values
        assert np.all(cur >= prev)
        prev = cur


def test_segment_composes_stages():
    rng = np.random.default_rng(5)
    grid = rng.normal(size=(4, 4, 3))
    bank = MemoryBank(rng.normal(size=(2, 3)))
    mlp = AdapterMLP.init([6, 8, 3], seed=1, decoder_bias=0.2)
    h = rng.normal(size=6)
    fq = attend_memory(project(h, mlp), bank)
    expected = decode_mask(fq.z, grid, 0.2)
    assert np.array_equal(segment(h, mlp, bank, grid).values, expected.values)


def test_adapter_validation():
    with pytest.raises(DimensionError):
        AdapterMLP([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])
    with pytest.raises(ValidationError):
        AdapterMLP([np.full((2, 2), np.nan)], [np.zeros(2)])


def test_adapter_round_trip(tmp_path):
    mlp = AdapterMLP.init([7, 9, 5], seed=11, decoder_bias=-1.25)
    save_adapter(mlp, tmp_path / "a.json")
    back = load_adapter(tmp_path / "a.json")
    assert back.dims == [7, 9, 5]
    assert np.array_equal(back.flat(), mlp.flat())
    save_adapter(back, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    import json
    data = json.loads((tmp_path / "a.json").read_text())
    assert list(data) == ["dims", "layers", "decoder_bias"]
    assert list(data["layers"][0]) == ["w", "b"]


def test_adapter_file_errors(tmp_path):
    (tmp_path / "bad.json").write_text('{"dims": [2, 2], "layers": [')
    with pytest.raises(FormatError) as err:
        load_adapter(tmp_path / "bad.json")
    assert err.value.offset == 28
    mlp = AdapterMLP.init([3, 2], seed=0).to_dict()
    mlp["dims"] = [3, 4]
    with pytest.raises(DimensionError):
        AdapterMLP.from_dict(mlp)


def test_flat_round_trip():
    mlp = AdapterMLP.init([4, 6, 3], seed=2, decoder_bias=0.5)
    vec = mlp.flat()
    assert vec.size == 4 * 6 + 6 + 6 * 3 + 3 + 1
    other = AdapterMLP.zeros([4, 6, 3]).set_flat(vec)
    assert np.array_equal(other.flat(), vec) and other.decoder_bias == 0.5
