import math

import numpy as np
import pytest

from h2onet.indices import IGNORE, IndexMap
from h2onet.pipeline import Scene, predict_raster, train_gan, train_segmentor
from h2onet.raster import band_statistics
from h2onet.refiner import RefinerConfig
from h2onet.segmentation import (
    SegBatch,
    SegConfig,
    SegmentorNet,
    SegState,
    load_segmentor,
    make_targets,
    predict_tile,
    save_segmentor,
    seg_forward,
    segmentation_loss,
    standardize_swir,
    train_joint_step,
)
from h2onet.swir_synth import GanConfig, GanState, generator_forward
from h2onet.synth import SceneSpec, generate_scene
from h2onet.tensor.engine import Tensor
from h2onet.tensor.gradcheck import check_gradients
from h2onet.tensor.nn import frozen_state

TOL = 1e-4
FAST_REFINER = RefinerConfig(k_iterations=5)


def small_seg(preset="h2onet", **kw):
    return SegConfig(preset=preset, base=2, max_width=4, refiner=FAST_REFINER, **kw)


def joint_batch(n=2, size=32, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3, size, size))
    half = np.where(np.arange(size)[None, :] < size // 2, 0.8, -0.6) * np.ones((size, 1))
    ix = [IndexMap.from_array(np.clip(half + rng.normal(0, 0.1, half.shape), -1, 1)) for _ in range(n)]
    return SegBatch(x, ix, [f"t{i}" for i in range(n)])


def test_prediction_shape():
    net = SegmentorNet(4, base=2, max_width=4)
    pred = seg_forward(net, Tensor(np.zeros((1, 3, 64, 64))), Tensor(np.zeros((1, 1, 64, 64))))
    assert pred.probabilities.shape == (1, 1, 64, 64)
    assert pred.labels.shape == (1, 64, 64) and pred.labels.dtype == np.int8


def test_swapped_channels_rejected():
    net = SegmentorNet(4, base=2, max_width=4)
    with pytest.raises(ValueError):
        seg_forward(net, Tensor(np.zeros((1, 1, 32, 32))), Tensor(np.zeros((1, 3, 32, 32))))
    with pytest.raises(ValueError, match="divisible by 32"):
        net(Tensor(np.zeros((1, 4, 48, 32))))


def test_loss_examples():
    t = np.array([[[1, 0], [0, 1]]], dtype=np.int8)
    assert float(segmentation_loss(Tensor(t[:, None].astype(float)), t).data) < 1e-6
    assert abs(float(segmentation_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), t).data) - math.log(2)) <= 1e-9


def test_loss_single_flip_delta():
    p = np.array([[[[0.9, 0.2], [0.3, 0.6]]]])
    t = np.array([[[1, 0], [0, 1]]], dtype=np.int8)
    base = float(segmentation_loss(Tensor(p), t).data)
    t2 = t.copy()
    t2[0, 0, 1] = 1
    delta = (-math.log(0.2) + math.log(0.8)) / 4
    assert abs(float(segmentation_loss(Tensor(p), t2).data) - base - delta) <= 1e-12


def test_loss_ignores_ignore_pixels():
    t = np.array([[[1, IGNORE], [0, 1]]], dtype=np.int8)
    p = np.full((1, 1, 2, 2), 0.7)
    base = float(segmentation_loss(Tensor(p), t).data)
    p[0, 0, 0, 1] = 0.01
    assert float(segmentation_loss(Tensor(p), t).data) == base
    with pytest.raises(ValueError):
        segmentation_loss(Tensor(p), np.full((1, 2, 2), IGNORE, dtype=np.int8))


def test_presets():
    assert small_seg().in_channels == 4 and small_seg().supervision == "refined"
    assert small_seg("unet_refined").in_channels == 3
    assert small_seg("unet").supervision == "coarse"
    with pytest.raises(ValueError):
        SegConfig(preset="deeplab")


def test_targets_come_from_the_batch_and_cache():
    batch = joint_batch()
    cache = {}
    t = make_targets(batch, small_seg(), cache)
    assert t.shape == (2, 32, 32) and set(cache) == {"t0", "t1"}
    coarse = make_targets(batch, small_seg("unet"))
    assert np.array_equal(coarse[0], (batch.indices[0].values >= 0.35).astype(np.int8))


def _params(module):
    return {k: v.copy() for k, v in module.state_dict().items()}


@pytest.mark.parametrize("frozen", [False, True])
def test_generator_moves_only_when_unfrozen(frozen):
    gan = GanState(GanConfig(base_g=2, base_d=2))
    seg = SegState(small_seg(freeze_generator=frozen))
    before = {n: p.data.copy() for n, p in gan.generator.named_parameters()}
    train_joint_step(joint_batch(), gan, seg)
    changed = [not np.array_equal(before[n], p.data) for n, p in gan.generator.named_parameters()]
    grads = [p.grad for p in gan.generator.parameters()]
    if frozen:
        assert not any(changed)
        assert all(g is None or not np.any(g) for g in grads)
    else:
        assert any(changed)
        assert any(g is not None and np.any(g) for g in grads)


def test_rgb_only_preset_needs_no_generator():
    seg = SegState(small_seg("unet"))
    r = train_joint_step(joint_batch(), None, seg)
    assert np.isfinite(r["L_S"]) and r["step"] == 0
    with pytest.raises(ValueError, match="needs a generator"):
        train_joint_step(joint_batch(), None, SegState(small_seg()))


def test_predict_tile_is_composition():
    gan = GanState(GanConfig(base_g=2, base_d=2))
    seg = SegState(small_seg(), swir_stats=(0.2, 0.1))
    x = np.random.default_rng(3).normal(size=(1, 3, 32, 32))
    out = predict_tile(x, gan.generator, seg.net, seg.swir_stats)
    gan.generator.eval()
    seg.net.eval()
    s = generator_forward(gan.generator, Tensor(x))
    direct = seg_forward(seg.net, Tensor(x), standardize_swir(s, seg.swir_stats))
    assert np.array_equal(out.probabilities.data, direct.probabilities.data)
    assert np.array_equal(out.probabilities.data, predict_tile(x, gan.generator, seg.net, seg.swir_stats).probabilities.data)


def test_segmentor_checkpoint(tmp_path):
    seg = SegState(small_seg("unet"))
    train_joint_step(joint_batch(), None, seg)
    save_segmentor(tmp_path / "s.ckpt", seg)
    back = load_segmentor(tmp_path / "s.ckpt", small_seg("unet"))
    x = np.random.default_rng(0).normal(size=(1, 3, 32, 32))
    assert np.array_equal(predict_tile(x, None, seg.net).probabilities.data, predict_tile(x, None, back.net).probabilities.data)
    with pytest.raises(ValueError, match="preset"):
        load_segmentor(tmp_path / "s.ckpt", small_seg("h2onet"))


def test_segmentor_gradients():
    net = SegmentorNet(4, base=2, max_width=2, seed=1)
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 4, 32, 32)), requires_grad=True)
    r = rng.normal(size=(2, 1, 32, 32))
    params = net.parameters()
    pick = [params[i] for i in np.random.default_rng(5).choice(len(params), 3, replace=False)]
    with frozen_state():
        errs = check_gradients(lambda: (net(x) * r).sum(), [x] + pick, n_entries=6)
    assert max(errs) < TOL


def test_refiner_gradients():
    from h2onet.refiner import RefinerNet

    net = RefinerNet(2, width=3, seed=2)
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 2, 8, 8)), requires_grad=True)
    r = rng.normal(size=(2, 1, 8, 8))
    with frozen_state():
        errs = check_gradients(lambda: (net(x) * r).sum(), [x] + net.parameters(), n_entries=6)
    assert max(errs) < TOL


def test_all_water_tile_after_short_training():
    scenes = []
    for i in range(8):
        sc = generate_scene(SceneSpec(32, 32, seed=i))
        scenes.append(Scene(f"s{i}", sc.raster, sc.truth))
    stats = band_statistics([s.raster for s in scenes])
    gan, _ = train_gan(scenes, stats, GanConfig(base_g=8, base_d=4, warmup_steps=20, total_steps=20), 4)
    cfg = SegConfig(total_steps=40, base=4, max_width=16, refiner=RefinerConfig(k_iterations=50))
    seg, rows = train_segmentor(scenes, stats, cfg, gan, 4)
    assert rows[-1]["L_S"] < rows[0]["L_S"]
    water = generate_scene(SceneSpec(32, 32, seed=99, n_blobs=1, n_streams=0, blob_radius=(3.0, 3.0)))
    assert np.all(water.truth == 1)
    p = predict_raster(water.raster, stats, gan.generator, seg, 64)
    assert (p >= 0.5).mean() > 0.9
    assert np.array_equal(p, predict_raster(water.raster, stats, gan.generator, seg, 64))
