import math

import numpy as np
import pytest

from refmatch.errors import DimensionError, TrainingError, ValidationError
from refmatch.fusion import AdapterMLP, MemoryBank
from refmatch.geometry import BCE_EPS, DICE_EPS, Mask
from refmatch.synth import GridSpec, SceneConfig, generate_scene_pair
from refmatch.training import (
    DESK_TRAIN_CONFIG, SegInstance, TrainConfig, TrainTrace, evaluate_adapter, finite_diff_check, forward_loss,
    instances_from_pair, level_curriculum, loss_gradients, lr_at, seg_loss, smoothed, train_adapter,
)


def separable_instance(d_vlm=8, scale=3.0):
    """Region pixels carry +scale*e1, background -scale*e1; one slot matches each."""
    gt = np.zeros((8, 8))
    gt[2:6, 1:5] = 1
    grid = np.zeros((8, 8, 4))
    grid[gt == 1] = [scale, 0, 0, 0]
    grid[gt == 0] = [-scale, 0, 0, 0]
    bank = MemoryBank(np.array([[scale, 0, 0, 0], [-scale, 0, 0, 0], [0, scale, 0, 0]]))
    h = np.random.default_rng(0).normal(size=d_vlm)
    return SegInstance(h, bank, grid, Mask(gt))


def random_instance(seed, size=(6, 5), d=4, n_slots=3, d_vlm=5):
    rng = np.random.default_rng(seed)
    gt = (rng.random(size) > 0.5).astype(float)
    return SegInstance(rng.normal(size=d_vlm), MemoryBank(rng.normal(size=(n_slots, d))),
                       rng.normal(size=size + (d,)), Mask(gt))


def test_train_config_validation_and_dict():
    with pytest.raises(ValidationError):
        TrainConfig(w_bce=0.5, w_dice=0.3)
    with pytest.raises(ValidationError):
        TrainConfig(warmup_fraction=0.5)
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=4)
    cfg = TrainConfig(epochs=3, seed=9)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"lr": 1.0})


def test_seg_loss_examples():
    gt = Mask(np.array([[1.0, 1.0, 0.0, 0.0]]))
    assert seg_loss(gt, gt) < 1e-6
    half = Mask(np.full((1, 4), 0.5))
    assert seg_loss(half, gt) == pytest.approx(0.7 * math.log(2) + 0.3 * 0.5, abs=1e-8)
    assert seg_loss(half, gt) == pytest.approx(0.635203, abs=1e-6)
    inverted = Mask(1.0 - gt.values)
    assert seg_loss(inverted, gt) >= 0.7 * (-math.log(BCE_EPS)) * 1.0 * 0.999
    with pytest.raises(DimensionError):
        seg_loss(gt, Mask(np.ones((2, 2))))


def test_seg_loss_bounds():
    rng = np.random.default_rng(0)
    upper = 0.7 * (-math.log(BCE_EPS)) + 0.3
    for _ in range(50):
        gt = Mask((rng.random((4, 4)) > 0.5).astype(float))
        pred = Mask(rng.random((4, 4)))
        assert 0.0 <= seg_loss(pred, gt) <= upper


def test_instance_shape_check():
    with pytest.raises(DimensionError):
        SegInstance(np.ones(3), MemoryBank(np.ones((1, 2))), np.zeros((4, 4, 2)), Mask(np.zeros((3, 4))))


def test_forward_loss_matches_gradient_pass():
    inst = random_instance(1)
    mlp = AdapterMLP.init([5, 7, 4], seed=1)
    loss, dice, _ = loss_gradients(mlp, inst)
    assert (loss, dice) == forward_loss(mlp, inst)


def test_gradient_vanishes_when_prediction_equals_target():
    inst = separable_instance(scale=30.0)
    # single linear layer with all weight on the region slot direction: q = 100 e1
    mlp = AdapterMLP([np.zeros((8, 4))], [np.array([100.0, 0, 0, 0])])
    loss, dice, grad = loss_gradients(mlp, inst)
    assert loss < 1e-6 and dice > 1 - 1e-6
    assert np.linalg.norm(grad.flat()) < 1e-6


def test_single_pixel_single_slot_hand_derivation():
    # one slot means alpha = 1 regardless of q, so only the decoder bias has
    # a gradient: p = s(f.m + b), g = 1,
    # L = -0.7 ln p + 0.3 (1 - 2p/(p + 1 + e)),
    # dL/db = p(1-p) [-0.7/p - 0.6 (1 + e)/(p + 1 + e)^2]
    m = np.array([0.4, -0.2])
    f = np.array([1.5, 0.5])
    inst = SegInstance(np.array([0.3, -0.7]), MemoryBank(m[None, :]), f[None, None, :], Mask(np.ones((1, 1))))
    mlp = AdapterMLP.init([2, 3, 2], seed=4, decoder_bias=0.25)
    x = float(f @ m + 0.25)
    p = 1.0 / (1.0 + math.exp(-x))
    e = DICE_EPS
    expected = p * (1 - p) * (-0.7 / p - 0.6 * (1 + e) / (p + 1 + e) ** 2)
    loss, _, grad = loss_gradients(mlp, inst)
    assert grad.decoder_bias == pytest.approx(expected, rel=1e-12)
    assert loss == pytest.approx(-0.7 * math.log(p) + 0.3 * (1 - 2 * p / (p + 1 + e)), rel=1e-12)
    assert all(np.all(w == 0) for w in grad.weights)
    assert all(np.all(b == 0) for b in grad.biases)


@pytest.mark.parametrize("seed", [7, 8])
def test_finite_difference_agreement(seed):
    inst = random_instance(seed)
    mlp = AdapterMLP.init([5, 7, 4], seed=seed, decoder_bias=-0.5)
    report = finite_diff_check(mlp, inst)
    assert report.passed, report
    assert report.n_checked == mlp.flat().size


def test_finite_difference_detects_corrupted_coordinate():
    inst = random_instance(7)
    mlp = AdapterMLP.init([5, 7, 4], seed=7)
    grad = loss_gradients(mlp, inst)[2].flat()
    big = int(np.argmax(np.abs(grad)))
    bad = grad.copy()
    bad[big] *= 2.0
    report = finite_diff_check(mlp, inst, analytic=bad)
    assert not report.passed
    assert report.failures == [big]
    assert report.worst_index == big


def test_finite_difference_passes_at_zero_gradient_point():
    inst = separable_instance(scale=30.0)
    mlp = AdapterMLP([np.zeros((8, 4))], [np.array([100.0, 0, 0, 0])])
    report = finite_diff_check(mlp, inst)
    assert report.passed
    assert report.max_abs_error < 1e-8


def test_finite_difference_subsamples_large_models():
    inst = random_instance(3, d=4, d_vlm=60)
    mlp = AdapterMLP.init([60, 200, 4], seed=3)
    assert mlp.flat().size > 10_000
    report = finite_diff_check(mlp, inst)
    assert report.n_checked == 10_000 and report.passed


def test_finite_difference_rejects_bad_step():
    with pytest.raises(ValidationError):
        finite_diff_check(AdapterMLP.init([5, 4]), random_instance(0), step=0.0)


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_at(0, 1000, cfg) == 0.0
    assert lr_at(30, 1000, cfg) == 2e-4
    assert abs(lr_at(1000, 1000, cfg)) < 1e-12
    with pytest.raises(ValidationError):
        lr_at(0, 0, cfg)
    with pytest.raises(ValidationError):
        lr_at(1001, 1000, cfg)


def test_lr_schedule_continuous_at_junction():
    cfg = TrainConfig()
    warm = 0.03 * 1000
    left = lr_at(warm - 1e-9, 1000, cfg)
    right = lr_at(warm, 1000, cfg)
    assert abs(left - right) < 1e-12
    assert lr_at(warm + 1e-9, 1000, cfg) == pytest.approx(right, abs=1e-12)


def test_lr_without_warmup_starts_at_peak():
    assert lr_at(0, 10, TrainConfig(warmup_fraction=0.0)) == 2e-4


def test_train_trace_matches_schedule_and_is_deterministic():
    inst = random_instance(2)
    cfg = TrainConfig(epochs=30, hidden=6, seed=5)
    mlp_a, tr_a = train_adapter([inst], cfg)
    mlp_b, tr_b = train_adapter([inst], cfg)
    assert tr_a.to_csv() == tr_b.to_csv()
    assert mlp_a.flat().tobytes() == mlp_b.flat().tobytes()
    assert tr_a.lr == [lr_at(s, 30, cfg) for s in range(30)]
    assert tr_a.to_csv().splitlines()[0] == "step,loss,dice,lr"
    assert len(tr_a.rows()) == 30


def test_zero_learning_rate_leaves_parameters_unchanged():
    inst = random_instance(2)
    init = AdapterMLP.init([5, 6, 4], seed=1)
    mlp, tr = train_adapter([inst], TrainConfig(learning_rate=0.0, epochs=10, hidden=6), init=init)
    assert np.array_equal(mlp.flat(), init.flat())
    assert len(set(tr.loss)) == 1


def test_separable_instance_learned_within_200_steps():
    inst = separable_instance()
    mlp, trace = train_adapter([inst], TrainConfig(learning_rate=1e-2, epochs=200))
    assert len(trace.loss) == 200
    assert trace.dice[-1] > 0.99
    assert evaluate_adapter(mlp, [inst]) > 0.99


def test_non_finite_loss_aborts_with_step():
    inst = random_instance(1)
    bad = SegInstance(inst.h * np.nan, inst.bank, inst.grid, inst.gt)
    with pytest.raises(TrainingError) as err:
        train_adapter([inst, bad], TrainConfig(epochs=1, hidden=4))
    assert err.value.step == 1


def test_training_rejects_empty_dataset():
    with pytest.raises(ValidationError):
        train_adapter([])


def test_smoothed_window():
    assert np.allclose(smoothed(np.arange(25.0), 20), np.arange(6) + 9.5)
    assert smoothed([1.0, 2.0], 20).tolist() == [1.0, 2.0]


def test_instances_from_pair_and_curriculum():
    pair = generate_scene_pair(SceneConfig(n_regions=3, seed=2, position_noise=0.0, scale_noise=0.0))
    insts = instances_from_pair(pair, d_vlm=16, grid_spec=GridSpec(dim=8, n_centers=4))
    assert [i.label for i in insts] == pair.reference.labels
    assert insts[0].grid.shape == (64, 64, 8)
    data, seeds = level_curriculum(4, SceneConfig(n_regions=3, position_noise=0.0, scale_noise=0.0),
                                   d_vlm=16, grid_spec=GridSpec(dim=8, n_centers=4))
    assert len(data) == 4 and seeds == sorted(seeds)
    again, seeds2 = level_curriculum(4, SceneConfig(n_regions=3, position_noise=0.0, scale_noise=0.0),
                                     d_vlm=16, grid_spec=GridSpec(dim=8, n_centers=4))
    assert seeds == seeds2 and all(np.array_equal(a.h, b.h) for a, b in zip(data, again))


def test_desk_config_is_frozen():
    assert DESK_TRAIN_CONFIG.learning_rate == 1e-3 and DESK_TRAIN_CONFIG.epochs == 100
    assert DESK_TRAIN_CONFIG.w_bce == 0.7 and DESK_TRAIN_CONFIG.warmup_fraction == 0.03
