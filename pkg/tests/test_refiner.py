import math

import numpy as np
import pytest

from h2onet.distmap import EmptyClassError, PointSet, adaptive_distance_map
from h2onet.indices import IndexMap, threshold_mask
from h2onet.refiner import (
    RefinerConfig,
    RefinerNet,
    build_ablation_input,
    build_refiner_input,
    held_out_accuracy,
    partial_label_loss,
    refine,
    refine_batch,
)
from h2onet.tensor.engine import Tensor

FAST = RefinerConfig(k_iterations=40)


def split_plane(h=16, w=16, noise=0.0, seed=0):
    """Left half water (0.8), right half land (-0.6)."""
    v = np.where(np.arange(w)[None, :] < w // 2, 0.8, -0.6) * np.ones((h, 1))
    if noise:
        v = v + np.random.default_rng(seed).normal(0, noise, v.shape)
    return IndexMap.from_array(np.clip(v, -1, 1))


def test_input_examples():
    ix = IndexMap.from_array(np.zeros((32, 48)))
    x = build_refiner_input(ix, np.zeros((32, 48)))
    assert x.shape == (1, 2, 32, 48)
    assert not x.data.any()
    rng = np.random.default_rng(0)
    vals, dm = rng.uniform(-1, 1, (6, 4)), rng.uniform(0, 1, (6, 4))
    x = build_refiner_input(IndexMap.from_array(vals), dm).data
    assert np.array_equal(x[0, 0], vals) and np.array_equal(x[0, 1], dm)
    with pytest.raises(ValueError):
        build_refiner_input(IndexMap.from_array(vals), np.zeros((4, 6)))
    assert build_ablation_input(IndexMap.from_array(vals), dm, dm).shape == (1, 3, 6, 4)


def test_net_output_matches_input_size():
    net = RefinerNet(2, width=4)
    assert net(Tensor(np.zeros((2, 2, 10, 12)))).shape == (2, 1, 10, 12)
    with pytest.raises(ValueError):
        net(Tensor(np.zeros((1, 3, 10, 12))))


def test_loss_at_half_is_four_ln2():
    pts = PointSet([(0, 0), (1, 0)], [(0, 1), (1, 1)])
    loss = partial_label_loss(Tensor(np.full((2, 2), 0.5)), pts)
    assert abs(float(loss.data) - 4 * math.log(2)) <= 1e-9


def test_loss_perfect_prediction():
    pts = PointSet([(0, 0), (1, 0)], [(0, 1), (1, 1)])
    p = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert float(partial_label_loss(Tensor(p), pts).data) <= 4 * -math.log(1 - 1e-7) + 1e-15


def test_loss_ignores_unsampled_pixels():
    pts = PointSet([(0, 0)], [(2, 2)])
    p = np.full((3, 3), 0.3)
    base = float(partial_label_loss(Tensor(p), pts).data)
    p[1, 1] = 0.99
    assert float(partial_label_loss(Tensor(p), pts).data) == base


def test_loss_needs_points():
    with pytest.raises(ValueError):
        partial_label_loss(Tensor(np.zeros((2, 2))), PointSet(np.zeros((0, 2)), np.zeros((0, 2))))


def test_k_contract():
    with pytest.raises(ValueError):
        RefinerConfig(k_iterations=0)
    r = refine(split_plane(), RefinerConfig(k_iterations=1))
    assert r.labels.shape == (16, 16) and set(np.unique(r.labels)) <= {0, 1}
    assert not r.fallback


def test_separable_plane_matches_threshold():
    ix = split_plane()
    r = refine(ix)
    coarse = threshold_mask(ix, 0.35).labels
    on_points = np.concatenate([r.points.water, r.points.nonwater])
    agree = r.labels[on_points[:, 1], on_points[:, 0]] == coarse[on_points[:, 1], on_points[:, 0]]
    assert agree.mean() >= 0.99


def test_probabilities_and_labels():
    r = refine(split_plane(noise=0.2), FAST)
    assert r.probabilities.min() >= 0 and r.probabilities.max() <= 1
    assert np.array_equal(r.labels, (r.probabilities >= 0.5).astype(np.int8))


def test_final_loss_not_above_initial():
    r = refine(split_plane(noise=0.3, seed=2), FAST)
    assert r.losses[-1] <= r.losses[0]


def test_deterministic():
    a = refine(split_plane(noise=0.3), FAST)
    b = refine(split_plane(noise=0.3), FAST)
    assert np.array_equal(a.probabilities, b.probabilities)


def test_batch_of_one_equals_single():
    ix = split_plane(noise=0.2)
    assert np.array_equal(refine_batch([ix], FAST)[0].probabilities, refine(ix, FAST).probabilities)


def test_duplicates_give_identical_masks():
    ix = split_plane(noise=0.2)
    a, b = refine_batch([ix, ix], FAST)
    assert np.array_equal(a.probabilities, b.probabilities)


def test_mixed_batch_falls_back_only_for_single_class_tile():
    only_water = IndexMap.from_array(np.full((16, 16), 0.9))
    good = split_plane(noise=0.2)
    out = refine_batch([good, only_water], FAST)
    assert not out[0].fallback and out[1].fallback
    assert np.array_equal(out[1].labels, threshold_mask(only_water, 0.35).labels)
    # the fallback tile does not change the other tile's training
    assert np.array_equal(out[0].probabilities, refine(good, FAST).probabilities)


def test_no_confident_pixels_raises():
    with pytest.raises(EmptyClassError):
        refine(IndexMap.from_array(np.zeros((8, 8))), FAST)


def test_ablation_variant_runs():
    r = refine(split_plane(noise=0.2), RefinerConfig(k_iterations=5, adaptive=False))
    assert r.labels.shape == (16, 16)


def test_held_out_accuracy_skips_points():
    truth = np.array([[1, 0], [0, 0]], dtype=np.int8)
    mask = np.array([[0, 0], [0, 0]], dtype=np.int8)
    assert held_out_accuracy(mask, truth, None) == 0.75
    assert held_out_accuracy(mask, truth, PointSet([(0, 0)], [(1, 1)])) == 1.0


def test_adaptive_map_feeds_channel_one():
    ix = split_plane()
    pts = PointSet([(0, 0)], [(15, 15)])
    dm = adaptive_distance_map(pts, 16, 16)
    assert np.array_equal(build_refiner_input(ix, dm).data[0, 1], dm.values)
