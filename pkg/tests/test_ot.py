import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from refmatch.errors import ValidationError
from refmatch.geometry import BBox
from refmatch.ot import (
    MatchConfig, Prototype, build_cost, extract_assignment, independent_assignment, match_cost,
    match_with_refinement, sinkhorn,
)

from oracles import best_permutation, max_weight_permutation


def _box_at(cx, cy, s=0.1):
    return BBox(cx - s / 2, cy - s / 2, s, s)


def test_build_cost_examples():
    centers = [(0.2, 0.2), (0.5, 0.7), (0.8, 0.3)]
    boxes = [_box_at(*c) for c in centers]
    C = build_cost(boxes, [Prototype(b) for b in boxes])
    assert np.all(np.diag(C) == 0.0)
    C = build_cost([_box_at(0.2, 0.5)], [Prototype(_box_at(0.7, 0.5))])
    assert C.shape == (1, 1) and C[0, 0] == pytest.approx(0.5, abs=1e-12)
    f = np.array([1.0, 2.0, 3.0])
    C = build_cost([_box_at(0.2, 0.5)], [Prototype(_box_at(0.7, 0.5), f)], weights=(0.5, 0.5), pred_features=[f])
    assert C[0, 0] == pytest.approx(0.25, abs=1e-12)


def test_build_cost_semantic_term():
    f, g = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    C = build_cost([_box_at(0.5, 0.5)], [Prototype(_box_at(0.5, 0.5), g)], weights=(0.0, 1.0), pred_features=[f])
    assert C[0, 0] == pytest.approx(1.0)


def test_build_cost_errors():
    with pytest.raises(ValidationError):
        build_cost([_box_at(0.5, 0.5)], [Prototype(_box_at(0.5, 0.5))], weights=(0.0, 0.0))
    with pytest.raises(ValidationError):
        build_cost([], [Prototype(_box_at(0.5, 0.5))])


def test_sinkhorn_examples():
    assert sinkhorn([[3.7]]).plan.tolist() == [[1.0]]
    P = sinkhorn(np.ones((4, 4))).plan
    assert np.allclose(P, 1 / 16, atol=1e-15)
    P = sinkhorn([[0.0, 1.0], [1.0, 0.0]], reg=0.01).plan
    assert np.allclose(P, [[0.5, 0.0], [0.0, 0.5]], atol=1e-4)


def test_sinkhorn_rejects_bad_input():
    with pytest.raises(ValidationError):
        sinkhorn([[1.0, -1.0], [0.0, 0.0]])
    with pytest.raises(ValidationError):
        sinkhorn([[1.0, np.nan], [0.0, 0.0]])
    with pytest.raises(ValidationError):
        sinkhorn([[1.0]], reg=0.0)


@pytest.mark.parametrize("reg", [1.0, 0.1, 0.05, 0.01, 0.003, 0.001])
def test_sinkhorn_marginals(reg):
    rng = np.random.default_rng(int(reg * 1000))
    for n in range(1, 7):
        tp = sinkhorn(rng.random((n, n)), reg=reg)
        assert tp.converged
        assert np.abs(tp.plan.sum(1) - 1 / n).sum() < 1e-6
        assert np.abs(tp.plan.sum(0) - 1 / n).sum() < 1e-6
        assert np.all(tp.plan >= 0)


def test_transport_cost_approaches_optimum_as_reg_shrinks():
    rng = np.random.default_rng(21)
    for _ in range(5):
        C = rng.random((4, 4))
        _, opt = best_permutation(C)
        gaps = [float((sinkhorn(C, reg=r).plan * C).sum()) - opt / 4 for r in (1.0, 0.1, 0.01, 0.001)]
        assert all(g >= -1e-9 for g in gaps)
        assert all(b <= a + 1e-9 for a, b in zip(gaps, gaps[1:]))
        assert gaps[-1] < 1e-3


def test_extract_assignment_examples():
    P = np.eye(3) / 3 + 0.01
    assert extract_assignment(P).pairs == [(0, 0), (1, 1), (2, 2)]
    assert extract_assignment(np.array([[0.1, 0.4], [0.4, 0.1]])).pairs == [(0, 1), (1, 0)]
    rng = np.random.default_rng(2)
    for _ in range(30):
        P = rng.random((5, 5))
        perm, _ = max_weight_permutation(P)
        assert [c for _, c in extract_assignment(P).pairs] == list(perm)
    with pytest.raises(ValidationError):
        extract_assignment(np.zeros((2, 2)))


def test_extract_assignment_recovers_every_permutation():
    for n in range(1, 8):
        perms = itertools.permutations(range(n))
        if n == 7:
            perms = itertools.islice(perms, 0, None, 7)
        for perm in perms:
            P = np.zeros((n, n))
            P[np.arange(n), perm] = 1.0 / n
            a = extract_assignment(P)
            assert [c for _, c in a.pairs] == list(perm)
            assert a.confidences == [1.0] * n


def test_confidence_is_scaled_plan_mass():
    P = np.array([[0.3, 0.2], [0.2, 0.3]])
    a = extract_assignment(P)
    assert a.confidences == pytest.approx([0.6, 0.6])


def test_independent_assignment_allows_duplicates():
    a = independent_assignment(np.array([[0.0, 1.0], [0.1, 1.0]]))
    assert a.pairs == [(0, 0), (1, 0)]
    assert a.unassigned_labels == [1]


def _layout(rng, n):
    return [_box_at(*rng.uniform(0.15, 0.85, 2)) for _ in range(n)]


def test_match_all_confident_equals_extract_assignment():
    rng = np.random.default_rng(0)
    boxes = _layout(rng, 5)
    protos = [Prototype(b) for b in boxes]
    cfg = MatchConfig(tau_cost_percentile=None)
    a = match_with_refinement(boxes[::-1], protos, cfg)
    raw = extract_assignment(sinkhorn(build_cost(boxes[::-1], protos), cfg.reg, cfg.max_iter, cfg.tol))
    assert a.pairs == raw.pairs and a.confidences == raw.confidences
    assert a.unassigned_labels == []


def test_outlier_recovered_through_callback():
    truth = [_box_at(0.2, 0.5), _box_at(0.4, 0.5), _box_at(0.6, 0.5), _box_at(0.8, 0.5)]
    preds = truth[:3] + [_box_at(0.2, 0.95)]
    protos = [Prototype(b, label=f"l{i}") for i, b in enumerate(truth)]
    plain = match_with_refinement(preds, protos)
    assert plain.unassigned_labels == [3]
    a = match_with_refinement(preds, protos, regenerate=lambda region: [truth[region.label_index]])
    assert a.unassigned_labels == []
    boxes = preds + a.recovered_boxes
    assert all(boxes[p] == truth[l] for p, l in a.pairs)
    assert sorted(l for _, l in a.pairs) == [0, 1, 2, 3]


def test_low_mass_pairs_are_voided():
    a = match_cost(np.ones((3, 3)))
    assert a.pairs == [] and a.unassigned_labels == [0, 1, 2]
    a = match_cost(np.ones((3, 3)), MatchConfig(tau_conf=0.0, tau_cost_percentile=None))
    assert len(a.pairs) == 3


def test_fewer_preds_than_labels_pads():
    rng = np.random.default_rng(3)
    truth = _layout(rng, 5)
    a = match_with_refinement(truth[:3], [Prototype(b) for b in truth], MatchConfig(tau_cost_percentile=None))
    assert len(a.unassigned_labels) == 2
    assert sorted(a.unassigned_labels) == [3, 4]


def test_more_preds_than_labels_pads():
    a = match_cost(np.array([[0.0], [1.0], [2.0]]), MatchConfig(tau_cost_percentile=None))
    assert a.pairs == [(0, 0)]


def test_failing_callback_never_aborts():
    truth = [_box_at(0.2, 0.2), _box_at(0.8, 0.8)]

    def broken(region):
        raise RuntimeError("detector down")

    a = match_with_refinement(truth[:1], [Prototype(b) for b in truth], MatchConfig(tau_cost_percentile=None),
                              regenerate=broken)
    assert a.unassigned_labels == [1]
    assert a.pairs == [(0, 0)]


def test_callback_candidates_overlapping_assigned_boxes_are_rejected():
    truth = [_box_at(0.2, 0.2), _box_at(0.8, 0.8)]
    a = match_with_refinement(truth[:1], [Prototype(b) for b in truth], MatchConfig(tau_cost_percentile=None),
                              regenerate=lambda r: [truth[0]])
    assert a.unassigned_labels == [1]


def test_cost_gate_voids_expensive_pairs():
    C = np.array([[0.0, 5.0], [5.0, 4.0]])
    gated = match_cost(C, MatchConfig(tau_cost_percentile=25.0))
    assert gated.pairs == [(0, 0)] and gated.unassigned_labels == [1]
    assert match_cost(C, MatchConfig(tau_cost_percentile=None)).pairs == [(0, 0), (1, 1)]


def test_assignment_to_dict():
    a = match_cost(np.array([[0.0, 1.0], [1.0, 0.0]]))
    d = a.to_dict(["a", "b"])
    assert d["pairs"] == [[0, 0], [1, 1]] and d["labels"] == {"0": "a", "1": "b"}


@given(st.integers(1, 6), st.integers(0, 10_000))
def test_assignment_is_injective(n, seed):
    C = np.random.default_rng(seed).random((n, n))
    a = extract_assignment(sinkhorn(C))
    preds = [p for p, _ in a.pairs]
    labels = [l for _, l in a.pairs]
    assert len(set(preds)) == len(preds) == n
    assert len(set(labels)) == n
    assert all(0.0 <= c <= 1.0 for c in a.confidences)


def test_ot_beats_independent_on_crowded_layouts():
    rng = np.random.default_rng(8)
    ot_hits = ind_hits = total = 0
    for _ in range(100):
        centers = rng.uniform(0.2, 0.8, size=(8, 2))
        noisy = np.clip(centers + rng.normal(0, 0.05, size=centers.shape), 0.06, 0.94)
        C = build_cost([_box_at(*c) for c in noisy], [Prototype(_box_at(*c)) for c in centers])
        ot = dict(match_cost(C, MatchConfig(tau_conf=0.0, tau_cost_percentile=None)).pairs)
        ind = dict(independent_assignment(C).pairs)
        ot_hits += sum(ot.get(i) == i for i in range(8))
        ind_hits += sum(ind[i] == i for i in range(8))
        total += 8
    assert ot_hits >= ind_hits
