import math

import numpy as np
import pytest

from h2onet.swir_synth import (
    Discriminator,
    GanConfig,
    GanState,
    Generator,
    LossWeights,
    discriminator_loss,
    feature_matching_loss,
    gan_total_loss,
    generator_forward,
    generator_loss,
    load_gan,
    patch_grid_shape,
    save_gan,
    synthesize,
    train_gan_step,
)
from h2onet.tensor.engine import NonFiniteError, Tensor
from h2onet.tensor.gradcheck import check_gradients
from h2onet.tensor.nn import ConvTranspose2d, SelfAttention, frozen_state

TOL = 1e-4


def toy_batch(n=4, size=32, seed=0):
    """SWIR = 1 - mean(RGB): a fixed, learnable mapping."""
    rgb = np.random.default_rng(seed).uniform(0, 1, (n, 3, size, size))
    return (rgb - 0.5) / math.sqrt(1 / 12), 1 - rgb.mean(axis=1, keepdims=True)


def test_generator_shape():
    g = Generator(base=4)
    assert generator_forward(g, Tensor(np.zeros((2, 3, 64, 64)))).shape == (2, 1, 64, 64)


def test_generator_needs_divisible_size():
    with pytest.raises(ValueError, match="divisible by 8"):
        Generator(base=4)(Tensor(np.zeros((1, 3, 12, 16))))
    with pytest.raises(ValueError, match="channels"):
        Generator(base=4)(Tensor(np.zeros((1, 4, 16, 16))))


def test_generator_eval_is_deterministic():
    g = Generator(base=4, seed=3)
    x = np.random.default_rng(1).normal(size=(1, 3, 16, 16))
    a = synthesize(g, x)
    assert np.array_equal(a, synthesize(g, x))
    assert np.array_equal(a, synthesize(Generator(base=4, seed=3), x))


def test_output_stats_map_to_reflectance():
    g = Generator(base=4)
    x = np.random.default_rng(1).normal(size=(1, 3, 16, 16))
    raw = synthesize(g, x)
    g.set_output_stats(0.3, 0.1)
    assert np.allclose(synthesize(g, x), raw * 0.1 + 0.3)


def test_discriminator_shapes_and_errors():
    d = Discriminator(base=4, max_width=16)
    out = d(Tensor(np.zeros((2, 1, 64, 96))))
    assert out.scores.shape == (2, 1, 2, 3)
    assert out.features.shape == (2, 16, 2, 3)
    assert np.all((out.scores.data > 0) & (out.scores.data < 1))
    with pytest.raises(ValueError, match="single-band"):
        d(Tensor(np.zeros((1, 3, 32, 32))))
    with pytest.raises(ValueError, match="divisible by 32"):
        d(Tensor(np.zeros((1, 1, 48, 32))))


@pytest.mark.parametrize("size", [(32, 32), (64, 96), (128, 64)])
def test_patch_grid_formula(size):
    h, w = size
    assert patch_grid_shape(h, w) == (h // 32, w // 32)
    d = Discriminator(base=2, max_width=4)
    assert d(Tensor(np.zeros((1, 1, h, w)))).scores.shape[2:] == patch_grid_shape(h, w)


# -- closed-form losses ------------------------------------------------------------------


def test_generator_loss_examples():
    s = np.random.default_rng(0).uniform(size=(2, 1, 4, 4))
    assert float(generator_loss(s, s, np.ones((2, 1, 2, 2))).total.data) == 0.0
    assert abs(float(generator_loss(s, s + 1, np.ones((2, 1, 2, 2))).total.data) - 1.0) <= 1e-9
    l0 = generator_loss(s, s, np.zeros((2, 1, 2, 2)))
    assert float(l0.total.data) == 1.0 and float(l0.pixel.data) == 0.0 and float(l0.adversarial.data) == 1.0
    with pytest.raises(ValueError):
        generator_loss(s, s[:, :, :2], np.ones(1))


def test_discriminator_loss_examples():
    z, o = np.zeros((1, 1, 2, 2)), np.ones((1, 1, 2, 2))
    assert float(discriminator_loss(z, o).data) == 0.0
    assert abs(float(discriminator_loss(o, z).data) - 2.0) <= 1e-9
    assert abs(float(discriminator_loss(0.5 * o, 0.5 * o).data) - 0.5) <= 1e-9


def test_feature_matching_examples():
    f = np.random.default_rng(0).normal(size=(2, 3, 2, 2))
    assert float(feature_matching_loss(f, f).data) == 0.0
    assert abs(float(feature_matching_loss(f, f + 0.7).data) - 0.49) <= 1e-9


def test_feature_matching_gradient_and_detach():
    rng = np.random.default_rng(1)
    real = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    fake = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    assert check_gradients(lambda: feature_matching_loss(real, fake), [fake])[0] < TOL
    real.grad = None
    feature_matching_loss(real, fake).backward()
    assert real.grad is None or not np.any(real.grad)


def test_total_loss_examples():
    assert gan_total_loss(0.0, 0.0, 0.0) == 0.0
    assert abs(gan_total_loss(0.2, 0.3, 0.5, LossWeights(1, 1, 1)) - 1.0) <= 1e-9
    base = gan_total_loss(0.2, 0.3, 0.5, LossWeights(1, 1, 2))
    doubled = gan_total_loss(0.2, 0.3, 0.5, LossWeights(1, 1, 4))
    assert abs((doubled - base) - 2 * 0.5) <= 1e-12
    with pytest.raises(ValueError):
        LossWeights(lambda_f=-1)


def test_default_weights():
    assert LossWeights() == LossWeights(1.0, 1.0, 10.0)


# -- training ----------------------------------------------------------------------------


def small_state(**kw):
    return GanState(GanConfig(base_g=4, base_d=4, **kw))


def test_warmup_leaves_discriminator_untouched():
    state = small_state(warmup_steps=3, total_steps=6)
    before = state.discriminator.state_dict()
    x, s = toy_batch(2)
    for _ in range(3):
        r = train_gan_step((x, s), state)
        assert np.isnan(r["L_D"]) and np.isfinite(r["L_G-pixel"])
    after = state.discriminator.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    r = train_gan_step((x, s), state)
    assert all(np.isfinite(r[k]) for k in ("L_G-pixel", "L_G-adv", "L_D", "L_F"))
    assert any(not np.array_equal(before[k], v) for k, v in state.discriminator.state_dict().items())


def test_seeded_runs_are_bit_identical():
    x, s = toy_batch(2)
    runs = []
    for _ in range(2):
        state = small_state(warmup_steps=1, total_steps=3)
        logs = [train_gan_step((x, s), state) for _ in range(3)]
        runs.append((logs, state.state_dict()))
    for a, b in zip(runs[0][0], runs[1][0]):
        assert np.array_equal(list(a.values()), list(b.values()), equal_nan=True)
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


def test_nan_input_names_term_and_step():
    state = small_state(warmup_steps=1)
    x, s = toy_batch(2)
    train_gan_step((x, s), state)
    s = s.copy()
    s[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="discriminator.*step 1"):
        train_gan_step((x, s), state)


def test_toy_mapping_pixel_loss_halves():
    # lr raised from the 2e-4 default: 50 steps at 2e-4 only move the pixel term ~10%
    x, s = toy_batch(4)
    state = GanState(GanConfig(lr_g=2e-3, warmup_steps=20, total_steps=50))
    logs = [train_gan_step((x, s), state) for _ in range(50)]
    assert logs[-1]["L_G-pixel"] <= 0.5 * logs[0]["L_G-pixel"]


def test_spectral_norm_bound_after_training():
    x, s = toy_batch(2)
    state = small_state(warmup_steps=5, total_steps=30)
    for _ in range(30):
        train_gan_step((x, s), state)
    for net in (state.generator, state.discriminator):
        for m in net.modules():
            if getattr(m, "spectral_norm", False):
                w = m.effective_weight().data
                mat = (w.transpose(1, 0, 2, 3) if isinstance(m, ConvTranspose2d) else w).reshape(w.shape[1 if isinstance(m, ConvTranspose2d) else 0], -1)
                assert np.linalg.svd(mat, compute_uv=False)[0] <= 1.05


def test_checkpoint_round_trip(tmp_path):
    x, s = toy_batch(2)
    state = small_state(warmup_steps=1, total_steps=2)
    for _ in range(2):
        train_gan_step((x, s), state)
    save_gan(tmp_path / "g.ckpt", state)
    back = load_gan(tmp_path / "g.ckpt", state.config)
    assert back.step == 2
    a, b = state.state_dict(), back.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert np.array_equal(synthesize(state.generator, x), synthesize(back.generator, x))


# -- gradient checks ---------------------------------------------------------------------


def _pick(params, k, seed):
    rng = np.random.default_rng(seed)
    return [params[i] for i in rng.choice(len(params), size=k, replace=False)]


def test_generator_gradients():
    g = Generator(base=2, dropout=0.0, seed=1)
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
    r = rng.normal(size=(2, 1, 8, 8))
    with frozen_state():
        errs = check_gradients(lambda: (g(x) * r).sum(), [x] + _pick(g.parameters(), 3, 0), n_entries=6)
    assert max(errs) < TOL


def test_discriminator_gradients():
    d = Discriminator(base=2, max_width=4, seed=2)
    for m in d.modules():
        if isinstance(m, SelfAttention):
            m.gamma.data[:] = 0.5  # open the attention gate so its weights get gradients
    rng = np.random.default_rng(0)
    s = Tensor(rng.normal(size=(2, 1, 64, 64)), requires_grad=True)
    with frozen_state():
        errs = check_gradients(
            lambda: d(s).scores.sum() + (d(s).features ** 2).mean(), [s] + _pick(d.parameters(), 3, 1), n_entries=6
        )
    assert max(errs) < TOL
