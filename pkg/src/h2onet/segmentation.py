"""Water segmentation from RGB plus synthesized SWIR2, and joint fine-tuning with the generator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .indices import IGNORE, IndexMap, threshold_mask
from .refiner import RefinedMask, RefinerConfig, refine_batch
from .swir_synth import GanState, Generator
from .tensor import functional as F
from .tensor.checkpoint import load_checkpoint, save_checkpoint
from .tensor.engine import NonFiniteError, Tensor, clamp, log, no_grad
from .tensor.nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module, child_rng
from .tensor.optim import Adam, CosineSchedule

SEG_STAGES = 5
PROB_EPS = 1e-7

# name -> (uses synthesized SWIR2, supervision)
PRESETS = {
    "h2onet": (True, "refined"),
    "unet_refined": (False, "refined"),
    "unet": (False, "coarse"),
}


class _DoubleConv(Module):
    """Two SN conv3x3 layers, then batch norm and leaky relu."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, 1, 1, spectral_norm=True, rng=child_rng(rng))
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, spectral_norm=True, rng=child_rng(rng))
        self.norm = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return F.leaky_relu(self.norm(self.conv2(self.conv1(x))), 0.2)


class SegmentorNet(Module):
    """U-shaped network with five encoder and five decoder blocks and a single-logit head.

    ``in_channels`` is 4 for RGB plus synthesized SWIR2 and 3 for the
    RGB-only baselines. Widths double per stage up to ``max_width``.
    """

    def __init__(self, in_channels: int = 4, base: int = 8, max_width: int = 64, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        widths = [min(base * 2**i, max_width) for i in range(SEG_STAGES)]
        cin = in_channels
        for i, w in enumerate(widths):
            setattr(self, f"enc{i}", _DoubleConv(cin, w, rng))
            setattr(self, f"pool{i}", Conv2d(w, w, 3, 2, 1, spectral_norm=True, rng=child_rng(rng)))
            cin = w
        for i in reversed(range(SEG_STAGES)):
            w = widths[i]
            setattr(self, f"up{i}", ConvTranspose2d(cin, w, 4, 2, 1, rng=child_rng(rng)))
            setattr(self, f"dec{i}", _DoubleConv(2 * w, w, rng))
            cin = w
        self.head = Conv2d(cin, 1, 1, rng=child_rng(rng))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"segmentor expects {self.in_channels} input channels, got {x.shape[1]}")
        h, w = x.shape[2], x.shape[3]
        if h % 2**SEG_STAGES or w % 2**SEG_STAGES:
            raise ValueError(f"segmentor needs height and width divisible by {2**SEG_STAGES}, got {h}x{w}")
        skips = []
        out = x
        for i in range(SEG_STAGES):
            out = getattr(self, f"enc{i}")(out)
            skips.append(out)
            out = getattr(self, f"pool{i}")(out)
        for i in reversed(range(SEG_STAGES)):
            out = getattr(self, f"up{i}")(out)
            out = getattr(self, f"dec{i}")(F.concat_channels(out, skips[i]))
        return self.head(out)


@dataclass
class SegPrediction:
    probabilities: Tensor  # (N, 1, H, W) in [0, 1]
    labels: np.ndarray  # (N, H, W) int8, water where p >= 0.5

    @classmethod
    def from_logits(cls, logits: Tensor) -> "SegPrediction":
        p = F.sigmoid(logits)
        return cls(p, (p.data[:, 0] >= 0.5).astype(np.int8))


def seg_forward(net: SegmentorNet, rgb: Tensor, s_tilde: Tensor | None = None) -> SegPrediction:
    """Concatenate RGB (3 channels) with standardized synthesized SWIR2 (1 channel) and segment.

    Passing the planes in the wrong order fails the channel checks rather
    than silently producing a prediction.
    """
    if rgb.shape[1] != 3:
        raise ValueError(f"rgb must have 3 channels, got {rgb.shape[1]}")
    if s_tilde is None:
        x = rgb
    else:
        if s_tilde.shape[1] != 1:
            raise ValueError(f"synthesized SWIR2 must have 1 channel, got {s_tilde.shape[1]}")
        x = F.concat_channels(rgb, s_tilde)
    return SegPrediction.from_logits(net(x))


def _target_array(target) -> np.ndarray:
    if isinstance(target, RefinedMask):
        return target.labels[None]
    if isinstance(target, (list, tuple)):
        return np.stack([_target_array(t)[0] if isinstance(t, RefinedMask) else np.asarray(t) for t in target])
    t = np.asarray(target)
    return t[None] if t.ndim == 2 else t


def segmentation_loss(pred: SegPrediction | Tensor, target) -> Tensor:
    """Mean binary cross-entropy over pixels whose target is not IGNORE."""
    p = pred.probabilities if isinstance(pred, SegPrediction) else pred
    t = _target_array(target)
    plane = p[:, 0] if p.ndim == 4 else p
    if plane.shape != t.shape:
        raise ValueError(f"prediction {plane.shape} and target {t.shape} differ")
    keep = t != IGNORE
    n = int(keep.sum())
    if n == 0:
        raise ValueError("target has no labelled pixels")
    y = np.where(keep, t, 0).astype(p.dtype)
    w = keep.astype(p.dtype)
    pc = clamp(plane, PROB_EPS, 1 - PROB_EPS)
    bce = -(log(pc) * (y * w) + log(1.0 - pc) * ((1.0 - y) * w))
    return bce.sum() / n


# -- joint training ----------------------------------------------------------------------


@dataclass
class SegConfig:
    preset: str = "h2onet"
    lr: float = 1e-3
    lr_generator: float = 2e-4
    total_steps: int = 100
    base: int = 8
    max_width: int = 64
    freeze_generator: bool = False
    cache_targets: bool = True
    coarse_threshold: float = 0.35
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if isinstance(self.refiner, dict):
            self.refiner = RefinerConfig(**self.refiner)

    @property
    def uses_swir(self) -> bool:
        return PRESETS[self.preset][0]

    @property
    def supervision(self) -> str:
        return PRESETS[self.preset][1]

    @property
    def in_channels(self) -> int:
        return 4 if self.uses_swir else 3


@dataclass
class SegBatch:
    x: np.ndarray  # (N, C, H, W) standardized generator input; the first three channels are RGB
    indices: list[IndexMap]  # MNDWI per image, for targets
    ids: list[str] | None = None


class SegState:
    def __init__(self, config: SegConfig = SegConfig(), swir_stats: tuple[float, float] = (0.0, 1.0)):
        self.config = config
        self.net = SegmentorNet(config.in_channels, config.base, config.max_width, seed=config.seed)
        self.opt = Adam(self.net.parameters(), config.lr)
        self.sched = CosineSchedule(config.lr, config.total_steps)
        self.gen_sched = CosineSchedule(config.lr_generator, config.total_steps)
        self.swir_stats = swir_stats
        self.cache: dict[str, np.ndarray] = {}
        self.step = 0


def make_targets(batch: SegBatch, config: SegConfig, cache: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """(N, H, W) int8 targets: refined masks from the batch MNDWI, or coarse threshold masks."""
    ids = batch.ids or [None] * len(batch.indices)
    out: list[np.ndarray | None] = [None] * len(ids)
    if cache is not None:
        for i, sid in enumerate(ids):
            if sid is not None and sid in cache:
                out[i] = cache[sid]
    todo = [i for i, o in enumerate(out) if o is None]
    if todo:
        if config.supervision == "refined":
            refined = refine_batch([batch.indices[i] for i in todo], config.refiner)
            made = [r.labels for r in refined]
        else:
            made = [threshold_mask(batch.indices[i], config.coarse_threshold).labels for i in todo]
        for i, labels in zip(todo, made):
            out[i] = labels
            if cache is not None and ids[i] is not None:
                cache[ids[i]] = labels
    return np.stack(out)


def standardize_swir(s_tilde: Tensor, stats: tuple[float, float]) -> Tensor:
    mu, sd = stats
    return (s_tilde - mu) * (1.0 / (sd if sd > 0 else 1.0))


def _segment(x: Tensor, generator: Generator | None, seg: SegmentorNet, swir_stats, track_generator: bool) -> SegPrediction:
    rgb = x[:, :3]
    if generator is None:
        return seg_forward(seg, rgb)
    if track_generator:
        s_tilde = generator(x)
    else:
        with no_grad():
            s_tilde = generator(x)
        s_tilde = s_tilde.detach()
    return seg_forward(seg, rgb, standardize_swir(s_tilde, swir_stats))


def train_joint_step(batch: SegBatch, gan_state: GanState | None, seg_state: SegState) -> dict[str, float]:
    """One segmentation step; with an unfrozen generator the loss also updates it through S~."""
    cfg = seg_state.config
    targets = make_targets(batch, cfg, seg_state.cache if cfg.cache_targets else None)
    generator = gan_state.generator if (cfg.uses_swir and gan_state is not None) else None
    if cfg.uses_swir and generator is None:
        raise ValueError(f"preset {cfg.preset!r} needs a generator")
    unfrozen = generator is not None and not cfg.freeze_generator

    seg_state.net.train()
    if generator is not None:
        generator.train(unfrozen)
        generator.zero_grad()
    seg_state.opt.zero_grad()
    pred = _segment(Tensor(batch.x), generator, seg_state.net, seg_state.swir_stats, unfrozen)
    loss = segmentation_loss(pred, targets)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite segmentation loss at step {seg_state.step}")
    loss.backward()
    lr = seg_state.sched.lr
    seg_state.opt.step(lr)
    if unfrozen:
        gan_state.opt_g.step(seg_state.gen_sched.lr)
    seg_state.sched.advance()
    seg_state.gen_sched.advance()
    report = {"step": seg_state.step, "lr": lr, "L_S": value}
    seg_state.step += 1
    return report


def predict_tile(x: np.ndarray, generator: Generator | None, seg: SegmentorNet, swir_stats=(0.0, 1.0)) -> SegPrediction:
    """Inference: input -> S~ -> concat with RGB -> segmentation. The refiner plays no part."""
    seg.eval()
    if generator is not None:
        generator.eval()
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    with no_grad():
        return _segment(Tensor(x), generator, seg, swir_stats, track_generator=False)


def save_segmentor(path, state: SegState, extra: dict | None = None) -> None:
    meta = {"kind": "segmentor", "preset": state.config.preset, "step": state.step, "swir_stats": list(state.swir_stats)}
    meta.update(extra or {})
    save_checkpoint(path, state.net.state_dict(), meta)


def segmentor_metadata(path) -> dict:
    return load_checkpoint(path, with_metadata=True)[1]


def load_segmentor(path, config: SegConfig) -> SegState:
    tensors, meta = load_checkpoint(path, with_metadata=True)
    if meta.get("kind") != "segmentor":
        raise ValueError(f"{path} is not a segmentor checkpoint")
    if meta.get("preset") != config.preset:
        raise ValueError(f"checkpoint preset {meta.get('preset')!r} does not match config {config.preset!r}")
    state = SegState(config, tuple(meta.get("swir_stats", (0.0, 1.0))))
    state.net.load_state_dict(tensors)
    state.step = int(meta.get("step", 0))
    return state
