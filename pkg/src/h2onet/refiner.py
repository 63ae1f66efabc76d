"""Run-time label refinement.

A small encoder-decoder is trained from scratch on each batch, supervised
only by high-confidence water/non-water pixels, and then predicts every pixel
of the same images to replace the coarse threshold mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distmap import (
    EmptyClassError,
    PointSet,
    Thresholds,
    adaptive_distance_map,
    raw_distance_maps,
    sample_confident_points,
)
from .indices import IGNORE, IndexMap, threshold_mask
from .tensor import functional as F
from .tensor.engine import Tensor, clamp, log, no_grad
from .tensor.nn import BatchNorm2d, Conv2d, InstanceNorm2d, Module, child_rng
from .tensor.optim import Adam, CosineSchedule

PROB_EPS = 1e-7


@dataclass
class RefinerConfig:
    k_iterations: int = 200
    lr: float = 1e-2
    thresholds: Thresholds = field(default_factory=Thresholds)
    seed: int = 0
    max_per_class: int = 1024
    width: int = 16
    adaptive: bool = True
    coarse_threshold: float = 0.35

    def __post_init__(self):
        if self.k_iterations < 1:
            raise ValueError("k_iterations must be at least 1")
        if isinstance(self.thresholds, dict):
            self.thresholds = Thresholds(**self.thresholds)


@dataclass
class RefinedMask:
    probabilities: np.ndarray
    labels: np.ndarray  # int8 WATER/LAND, IGNORE only in fallback masks
    fallback: bool = False
    points: PointSet | None = None
    losses: list[float] = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


class RefinerNet(Module):
    """One encoder block and one decoder block with a single-logit head.

    encoder: conv3x3 -> batch norm -> leaky relu -> conv3x3 stride 2 -> instance norm -> leaky relu
    decoder: bilinear x2 -> conv3x3 -> batch norm -> leaky relu -> conv3x3 -> instance norm -> leaky relu
    """

    def __init__(self, in_channels: int = 2, width: int = 16, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.enc1 = Conv2d(in_channels, width, 3, 1, 1, rng=child_rng(rng))
        self.enc1_norm = BatchNorm2d(width)
        self.enc2 = Conv2d(width, width, 3, 2, 1, rng=child_rng(rng))
        self.enc2_norm = InstanceNorm2d(width)
        self.dec1 = Conv2d(width, width, 3, 1, 1, rng=child_rng(rng))
        self.dec1_norm = BatchNorm2d(width)
        self.dec2 = Conv2d(width, width, 3, 1, 1, rng=child_rng(rng))
        self.dec2_norm = InstanceNorm2d(width)
        self.head = Conv2d(width, 1, 1, rng=child_rng(rng))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"refiner expects {self.in_channels} input channels, got {x.shape[1]}")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"refiner input size must be even, got {x.shape[2:]}")
        h = F.leaky_relu(self.enc1_norm(self.enc1(x)))
        h = F.leaky_relu(self.enc2_norm(self.enc2(h)))
        h = F.upsample_bilinear(h, 2)
        h = F.leaky_relu(self.dec1_norm(self.dec1(h)))
        h = F.leaky_relu(self.dec2_norm(self.dec2(h)))
        return self.head(h)


def build_refiner_input(index: IndexMap, dmap) -> Tensor:
    """(1, 2, H, W) tensor: channel 0 the index values, channel 1 the adaptive distance map."""
    values = dmap.values if hasattr(dmap, "values") else np.asarray(dmap)
    if values.shape != index.values.shape:
        raise ValueError(f"distance map shape {values.shape} does not match index {index.values.shape}")
    return Tensor(np.stack([index.values, values])[None])


def build_ablation_input(index: IndexMap, d_water: np.ndarray, d_nonwater: np.ndarray) -> Tensor:
    """(1, 3, H, W) tensor: index, raw water distance, raw non-water distance."""
    return Tensor(np.stack([index.values, d_water, d_nonwater])[None])


def partial_label_loss(probabilities: Tensor, points: PointSet, image: int = 0) -> Tensor:
    """Binary cross-entropy summed over sampled pixels only.

    ``-sum_{water} log p - sum_{non-water} log(1 - p)`` with ``p`` clamped to
    ``[eps, 1 - eps]``; every other pixel contributes nothing.
    """
    if len(points) == 0:
        raise ValueError("partial_label_loss needs at least one sampled point")
    p = probabilities
    if not isinstance(p, Tensor):
        p = Tensor(np.asarray(p, dtype=np.float64))
    plane = p if p.ndim == 2 else p[image, 0]
    terms = []
    if len(points.water):
        pw = clamp(plane[points.water[:, 1], points.water[:, 0]], PROB_EPS, 1 - PROB_EPS)
        terms.append(-log(pw).sum())
    if len(points.nonwater):
        pn = clamp(plane[points.nonwater[:, 1], points.nonwater[:, 0]], PROB_EPS, 1 - PROB_EPS)
        terms.append(-log(1.0 - pn).sum())
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def _fallback(index: IndexMap, config: RefinerConfig) -> RefinedMask:
    labels = threshold_mask(index, config.coarse_threshold).labels
    probs = np.where(labels == 1, 1.0, 0.0)
    return RefinedMask(probs, labels, fallback=True)


def _prepare(index: IndexMap, config: RefinerConfig) -> tuple[np.ndarray, PointSet] | None:
    try:
        points = sample_confident_points(index, config.thresholds, config.max_per_class, config.seed)
    except EmptyClassError as exc:
        if exc.both:
            raise
        return None
    h, w = index.values.shape
    if config.adaptive:
        dmap = adaptive_distance_map(points, w, h)
        x = build_refiner_input(index, dmap).data[0]
    else:
        dw, dn = raw_distance_maps(points, w, h)
        x = build_ablation_input(index, dw, dn).data[0]
    return x, points


def refine_batch(indices: list[IndexMap], config: RefinerConfig = RefinerConfig()) -> list[RefinedMask]:
    """Train one fresh refiner on the union of all images' confident points, then predict each image.

    Images with only one confident class fall back to the coarse threshold
    mask (``fallback=True``) and are left out of training. An image with no
    confident pixels at all raises :class:`EmptyClassError`.
    """
    prepared = [_prepare(ix, config) for ix in indices]
    out: list[RefinedMask | None] = [None] * len(indices)
    live = [i for i, p in enumerate(prepared) if p is not None]
    for i, p in enumerate(prepared):
        if p is None:
            out[i] = _fallback(indices[i], config)
    if not live:
        return out
    shapes = {indices[i].values.shape for i in live}
    if len(shapes) != 1:
        raise ValueError(f"refine_batch needs equally sized images, got {sorted(shapes)}")

    x = Tensor(np.stack([prepared[i][0] for i in live]))
    net = RefinerNet(in_channels=x.shape[1], width=config.width, seed=config.seed)
    opt = Adam(net.parameters(), lr=config.lr)
    sched = CosineSchedule(config.lr, config.k_iterations)

    def batch_loss() -> Tensor:
        probs = F.sigmoid(net(x))
        total = None
        for b, i in enumerate(live):
            term = partial_label_loss(probs, prepared[i][1], image=b)
            total = term if total is None else total + term
        return total

    losses = []
    net.train()
    for _ in range(config.k_iterations):
        opt.zero_grad()
        loss = batch_loss()
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"refiner loss became non-finite at iteration {len(losses)}")
        losses.append(float(loss.data))
        loss.backward()
        opt.step(sched.lr)
        sched.advance()

    net.eval()
    with no_grad():
        final = float(batch_loss().data)
        probs = F.sigmoid(net(x)).data[:, 0]
    losses.append(final)
    for b, i in enumerate(live):
        p = np.clip(probs[b], 0.0, 1.0)
        labels = (p >= 0.5).astype(np.int8)
        out[i] = RefinedMask(p, labels, fallback=False, points=prepared[i][1], losses=losses)
    return out


def refine(index: IndexMap, config: RefinerConfig = RefinerConfig()) -> RefinedMask:
    """Refine a single image; identical to a batch of one."""
    return refine_batch([index], config)[0]


def held_out_accuracy(mask: np.ndarray, truth: np.ndarray, points: PointSet | None) -> float:
    """Accuracy against ``truth`` over pixels that were not sampled as supervision."""
    keep = truth != IGNORE
    if points is not None:
        for pts in (points.water, points.nonwater):
            keep[pts[:, 1], pts[:, 0]] = False
    return float((mask[keep] == truth[keep]).mean())
