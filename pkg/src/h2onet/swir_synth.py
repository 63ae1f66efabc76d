"""SWIR2 synthesis from RGB: a U-shaped generator, a PatchGAN critic and their training step.

The generator regresses raw SWIR2 reflectance from standardized RGB (or
RGB+NIR). The discriminator only ever sees single-band SWIR2 planes, real or
synthesized, and scores overlapping patches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .tensor import functional as F
from .tensor.checkpoint import load_checkpoint, save_checkpoint
from .tensor.engine import NonFiniteError, Tensor, mean, no_grad
from .tensor.nn import BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, Module, SelfAttention, child_rng, frozen_state
from .tensor.optim import Adam, CosineSchedule

GEN_STAGES = 3
DISC_BLOCKS = 5


def _check_divisible(x: Tensor, factor: int, what: str) -> None:
    h, w = x.shape[2], x.shape[3]
    if h % factor or w % factor:
        raise ValueError(f"{what} needs height and width divisible by {factor}, got {h}x{w}")


class _ConvBlock(Module):
    """SN conv3x3 -> batch norm -> leaky relu -> dropout."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dropout: float):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, 1, 1, spectral_norm=True, rng=child_rng(rng))
        self.norm = BatchNorm2d(cout)
        self.drop = Dropout(dropout, seed=int(rng.integers(2**31)))

    def forward(self, x: Tensor) -> Tensor:
        return self.drop(F.leaky_relu(self.norm(self.conv(x)), 0.2))


class Generator(Module):
    """Three encoder and three decoder blocks joined by skip connections, linear 1-channel head.

    The head predicts standardized SWIR2; a fixed (mean, std) buffer maps it
    back to reflectance, so outputs are directly comparable with raw SWIR2.

    Encoder block ``i`` runs at 1/2**i resolution and is followed by a
    stride-2 SN conv. Each decoder block upsamples with an SN 4x4 stride-2
    transposed conv, concatenates the matching encoder output and applies a
    conv block.
    """

    def __init__(self, in_channels: int = 3, base: int = 16, dropout: float = 0.2, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        widths = [base * 2**i for i in range(GEN_STAGES)]
        self.widths = widths
        cin = in_channels
        for i, w in enumerate(widths):
            setattr(self, f"enc{i}", _ConvBlock(cin, w, rng, dropout))
            setattr(self, f"down{i}", Conv2d(w, w, 3, 2, 1, spectral_norm=True, rng=child_rng(rng)))
            cin = w
        for i in reversed(range(GEN_STAGES)):
            w = widths[i]
            setattr(self, f"up{i}", ConvTranspose2d(cin, w, 4, 2, 1, spectral_norm=True, rng=child_rng(rng)))
            setattr(self, f"dec{i}", _ConvBlock(2 * w, w, rng, dropout))
            cin = w
        self.head = Conv2d(cin, 1, 1, rng=child_rng(rng))
        self.head.weight.data *= 0.1
        # fixed affine from standardized to reflectance units, set from dataset statistics
        self.register_buffer("output_stats", np.array([0.0, 1.0]))

    def set_output_stats(self, mean_: float, std: float) -> None:
        self.output_stats[:] = (mean_, std if std > 0 else 1.0)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"generator expects {self.in_channels} input channels, got {x.shape[1]}")
        _check_divisible(x, 2**GEN_STAGES, "generator")
        skips = []
        h = x
        for i in range(GEN_STAGES):
            h = getattr(self, f"enc{i}")(h)
            skips.append(h)
            h = getattr(self, f"down{i}")(h)
        for i in reversed(range(GEN_STAGES)):
            h = getattr(self, f"up{i}")(h)
            h = getattr(self, f"dec{i}")(F.concat_channels(h, skips[i]))
        mu, sd = self.output_stats
        return self.head(h) * float(sd) + float(mu)


def generator_forward(generator: Generator, rgb: Tensor) -> Tensor:
    """(N, C, H, W) standardized input -> (N, 1, H, W) synthesized SWIR2 reflectance."""
    return generator(rgb)


class DiscriminatorOutput(NamedTuple):
    scores: Tensor  # (N, 1, H/32, W/32) in (0, 1)
    features: Tensor  # output of the last block


class Discriminator(Module):
    """Five SN conv4x4 stride-2 blocks with batch norm and relu; self-attention after blocks 2 and 4.

    The last block's output is the feature tensor for feature matching; a
    1x1 conv and a sigmoid turn it into one score per patch, so the score
    grid is (H/32, W/32).
    """

    def __init__(self, in_channels: int = 1, base: int = 8, max_width: int = 64, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        cin = in_channels
        for i in range(DISC_BLOCKS):
            w = min(base * 2**i, max_width)
            setattr(self, f"conv{i}", Conv2d(cin, w, 4, 2, 1, spectral_norm=True, rng=child_rng(rng)))
            setattr(self, f"norm{i}", BatchNorm2d(w))
            if i in (1, 3):
                setattr(self, f"attn{i}", SelfAttention(w, rng=child_rng(rng)))
            cin = w
        self.feature_channels = cin
        self.head = Conv2d(cin, 1, 1, spectral_norm=True, rng=child_rng(rng))

    def forward(self, s: Tensor) -> DiscriminatorOutput:
        if s.shape[1] != 1:
            raise ValueError(f"discriminator scores single-band SWIR2, got {s.shape[1]} channels")
        _check_divisible(s, 2**DISC_BLOCKS, "discriminator")
        h = s
        for i in range(DISC_BLOCKS):
            h = F.relu(getattr(self, f"norm{i}")(getattr(self, f"conv{i}")(h)))
            if i in (1, 3):
                h = getattr(self, f"attn{i}")(h)
        return DiscriminatorOutput(F.sigmoid(self.head(h)), h)


def patch_grid_shape(height: int, width: int) -> tuple[int, int]:
    """Score-grid size for an input of the given size: each stride-2 4x4 conv with padding 1 halves it."""
    for _ in range(DISC_BLOCKS):
        height = F.conv_output_size(height, 4, 2, 1)
        width = F.conv_output_size(width, 4, 2, 1)
    return height, width


# -- losses ------------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    lambda_g: float = 1.0
    lambda_d: float = 1.0
    lambda_f: float = 10.0

    def __post_init__(self):
        for name in ("lambda_g", "lambda_d", "lambda_f"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


class GeneratorLoss(NamedTuple):
    total: Tensor
    pixel: Tensor
    adversarial: Tensor


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def generator_loss(s, s_tilde, d_fake_scores) -> GeneratorLoss:
    """Mean squared pixel error plus mean squared (1 - patch score)."""
    s, s_tilde, scores = _as_tensor(s), _as_tensor(s_tilde), _as_tensor(d_fake_scores)
    if s.shape != s_tilde.shape:
        raise ValueError(f"real and synthesized SWIR differ in shape: {s.shape} vs {s_tilde.shape}")
    pixel = mean((s_tilde - s) ** 2)
    adversarial = mean((1.0 - scores) ** 2)
    return GeneratorLoss(pixel + adversarial, pixel, adversarial)


def discriminator_loss(d_fake_scores, d_real_scores) -> Tensor:
    """Least-squares patch loss with fake target 0 and real target 1."""
    fake, real = _as_tensor(d_fake_scores), _as_tensor(d_real_scores)
    return mean(fake**2) + mean((1.0 - real) ** 2)


def feature_matching_loss(feat_real, feat_fake) -> Tensor:
    """Mean squared difference of last-block features; the real branch is detached."""
    real, fake = _as_tensor(feat_real), _as_tensor(feat_fake)
    if real.shape != fake.shape:
        raise ValueError(f"feature shapes differ: {real.shape} vs {fake.shape}")
    return mean((fake - real.detach()) ** 2)


def gan_total_loss(l_g, l_d, l_f, weights: LossWeights = LossWeights()):
    """``lambda_g * L_G + lambda_d * L_D + lambda_f * L_F``.

    Training never minimizes this sum directly: the generator step uses
    ``lambda_g * L_G + lambda_f * L_F`` and the discriminator step uses
    ``lambda_d * L_D``.
    """
    return weights.lambda_g * l_g + weights.lambda_d * l_d + weights.lambda_f * l_f


# -- training ----------------------------------------------------------------------------


@dataclass
class GanConfig:
    lr_g: float = 2e-4
    lr_d: float = 6e-4
    warmup_steps: int = 20
    total_steps: int = 200
    weights: LossWeights = field(default_factory=LossWeights)
    base_g: int = 16
    base_d: int = 8
    dropout: float = 0.2
    use_nir: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.warmup_steps < 0 or self.total_steps < 1:
            raise ValueError("warmup_steps must be >= 0 and total_steps >= 1")

    @property
    def in_channels(self) -> int:
        return 4 if self.use_nir else 3


class GanState:
    """Generator, discriminator, their optimizers and cosine schedules, and the step counter."""

    def __init__(self, config: GanConfig = GanConfig()):
        self.config = config
        self.generator = Generator(config.in_channels, config.base_g, config.dropout, seed=config.seed)
        self.discriminator = Discriminator(1, config.base_d, seed=config.seed + 1)
        self.opt_g = Adam(self.generator.parameters(), config.lr_g)
        self.opt_d = Adam(self.discriminator.parameters(), config.lr_d)
        self.sched_g = CosineSchedule(config.lr_g, config.total_steps)
        self.sched_d = CosineSchedule(config.lr_d, max(config.total_steps - config.warmup_steps, 1))
        self.step = 0

    @property
    def warming_up(self) -> bool:
        return self.step < self.config.warmup_steps

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"generator.{k}": v for k, v in self.generator.state_dict().items()}
        out.update({f"discriminator.{k}": v for k, v in self.discriminator.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        def part(prefix):
            return {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}

        self.generator.load_state_dict(part("generator."))
        self.discriminator.load_state_dict(part("discriminator."))


def _finite(value: Tensor, term: str, step: int) -> float:
    v = float(value.data)
    if not np.isfinite(v):
        raise NonFiniteError(f"non-finite {term} loss at GAN step {step}")
    return v


def train_gan_step(batch: tuple[np.ndarray, np.ndarray], state: GanState) -> dict[str, float]:
    """One optimization step on ``(x, s)``: standardized input and raw SWIR2, both (N, C, H, W).

    During warmup only the generator moves, on the pixel term alone. After
    that a discriminator step is followed by a generator step. Returns the
    loss report for logging; terms not computed in a phase are NaN.
    """
    x = Tensor(np.asarray(batch[0]))
    s = Tensor(np.asarray(batch[1]))
    cfg, step = state.config, state.step
    g, d = state.generator, state.discriminator
    g.train()
    d.train()
    report = {"step": step, "lr": state.sched_g.lr, "L_G-pixel": np.nan, "L_G-adv": np.nan, "L_D": np.nan, "L_F": np.nan}

    if state.warming_up:
        state.opt_g.zero_grad()
        pixel = generator_loss(s, g(x), Tensor(np.ones((1,)))).pixel
        report["L_G-pixel"] = _finite(pixel, "generator pixel", step)
        (cfg.weights.lambda_g * pixel).backward()
        state.opt_g.step(state.sched_g.lr)
    else:
        state.opt_d.zero_grad()
        with no_grad():
            fake = g(x)
        l_d = discriminator_loss(d(fake.detach()).scores, d(s).scores)
        report["L_D"] = _finite(l_d, "discriminator", step)
        (cfg.weights.lambda_d * l_d).backward()
        state.opt_d.step(state.sched_d.lr)
        state.sched_d.advance()

        state.opt_g.zero_grad()
        fake = g(x)
        with frozen_state():
            fake_out = d(fake)
            with no_grad():
                real_out = d(s)
        lg = generator_loss(s, fake, fake_out.scores)
        l_f = feature_matching_loss(real_out.features, fake_out.features)
        report["L_G-pixel"] = _finite(lg.pixel, "generator pixel", step)
        report["L_G-adv"] = _finite(lg.adversarial, "generator adversarial", step)
        report["L_F"] = _finite(l_f, "feature matching", step)
        (cfg.weights.lambda_g * lg.total + cfg.weights.lambda_f * l_f).backward()
        state.opt_g.step(state.sched_g.lr)
        d.zero_grad()
    state.sched_g.advance()
    state.step += 1
    return report


def input_bands(use_nir: bool) -> tuple[str, ...]:
    return ("R", "G", "B", "NIR") if use_nir else ("R", "G", "B")


def gan_arrays(rasters, stats: dict[str, tuple[float, float]], use_nir: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Stack rasters into (standardized input, raw SWIR2) arrays of shape (N, C, H, W) and (N, 1, H, W)."""
    names = input_bands(use_nir)
    x = np.stack([r.normalized(stats, names) for r in rasters])
    s = np.stack([r.band("SWIR2")[None] for r in rasters])
    return x, s


def synthesize(generator: Generator, x: np.ndarray) -> np.ndarray:
    """Eval-mode inference without building a graph."""
    generator.eval()
    with no_grad():
        return generator(Tensor(np.asarray(x))).data


def save_gan(path, state: GanState, extra: dict | None = None) -> None:
    meta = {"kind": "gan", "step": state.step, "in_channels": state.config.in_channels}
    meta.update(extra or {})
    save_checkpoint(path, state.state_dict(), meta)


def load_gan(path, config: GanConfig) -> GanState:
    tensors, meta = load_checkpoint(path, with_metadata=True)
    if meta.get("kind") != "gan":
        raise ValueError(f"{path} is not a GAN checkpoint")
    state = GanState(config)
    state.load_state_dict(tensors)
    state.step = int(meta.get("step", 0))
    return state
