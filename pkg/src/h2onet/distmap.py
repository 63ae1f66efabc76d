"""Confident-point sampling and Euclidean distance maps.

Coordinates are ``(x, y)`` = (column, row) on the integer pixel grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .indices import IndexMap

WATER_CLASS = "water"
NONWATER_CLASS = "non-water"


class EmptyClassError(ValueError):
    """No confident pixels for one or both classes."""

    def __init__(self, classes: tuple[str, ...]):
        super().__init__(f"no confident points for: {', '.join(classes)}")
        self.classes = classes

    @property
    def both(self) -> bool:
        return len(self.classes) == 2


@dataclass(frozen=True)
class Thresholds:
    phi_high: float = 0.5
    phi_low: float = -0.2

    def __post_init__(self):
        if not self.phi_high > self.phi_low:
            raise ValueError(f"phi_high ({self.phi_high}) must exceed phi_low ({self.phi_low})")


@dataclass
class PointSet:
    water: np.ndarray  # (n, 2) int (x, y)
    nonwater: np.ndarray

    def __post_init__(self):
        self.water = np.asarray(self.water, dtype=np.int64).reshape(-1, 2)
        self.nonwater = np.asarray(self.nonwater, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.water) + len(self.nonwater)

    def validate(self, width: int, height: int) -> None:
        for pts in (self.water, self.nonwater):
            if len(pts) and (pts.min() < 0 or np.any(pts[:, 0] >= width) or np.any(pts[:, 1] >= height)):
                raise ValueError("point outside image bounds")
        w = {tuple(p) for p in self.water.tolist()}
        if any(tuple(p) in w for p in self.nonwater.tolist()):
            raise ValueError("a pixel is both a water and a non-water point")


@dataclass
class DistanceMap:
    values: np.ndarray
    source_class: str | None = None


@dataclass
class AdaptiveDistanceMap:
    values: np.ndarray
    dense_class: str


def _pick(candidates: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if len(candidates) > cap:
        keep = np.sort(rng.choice(len(candidates), size=cap, replace=False))
        candidates = candidates[keep]
    return candidates


def sample_confident_points(
    index: IndexMap, thresholds: Thresholds = Thresholds(), max_per_class: int = 1024, seed: int = 0
) -> PointSet:
    """Water points where index >= phi_high, non-water where index <= phi_low.

    Classes larger than ``max_per_class`` are uniformly subsampled with a
    seeded generator. Raises :class:`EmptyClassError` naming the empty
    class(es).
    """
    valid = ~index.invalid
    ys, xs = np.nonzero((index.values >= thresholds.phi_high) & valid)
    water = np.stack([xs, ys], axis=1)
    ys, xs = np.nonzero((index.values <= thresholds.phi_low) & valid)
    nonwater = np.stack([xs, ys], axis=1)
    empty = tuple(name for name, pts in ((WATER_CLASS, water), (NONWATER_CLASS, nonwater)) if len(pts) == 0)
    if empty:
        raise EmptyClassError(empty)
    rng = np.random.default_rng(seed)
    return PointSet(_pick(water, max_per_class, rng), _pick(nonwater, max_per_class, rng))


def _column_pass(feature: np.ndarray) -> np.ndarray:
    """Squared distance to the nearest feature pixel within each column (inf if none)."""
    h, w = feature.shape
    rows = np.arange(h)[:, None]
    big = np.iinfo(np.int64).max // 4
    last = np.full(w, -big, dtype=np.int64)
    up = np.empty((h, w), dtype=np.int64)
    for y in range(h):
        last = np.where(feature[y], y, last)
        up[y] = last
    nxt = np.full(w, big, dtype=np.int64)
    down = np.empty((h, w), dtype=np.int64)
    for y in range(h - 1, -1, -1):
        nxt = np.where(feature[y], y, nxt)
        down[y] = nxt
    d = np.minimum(rows - up, down - rows).astype(np.float64)
    d[d >= big // 2] = np.inf
    return d * d


def _lower_envelope_1d(f: list[float]) -> list[float]:
    """min_q' (q - q')^2 + f(q') for every q, via the lower envelope of parabolas."""
    n = len(f)
    sites = [q for q in range(n) if f[q] != np.inf]
    if not sites:
        return [np.inf] * n
    v = [sites[0]]
    z = [-np.inf, np.inf]
    for q in sites[1:]:
        fq = f[q] + q * q
        while True:
            p = v[-1]
            s = (fq - (f[p] + p * p)) / (2 * q - 2 * p)
            if s <= z[-2] and len(v) > 1:
                v.pop()
                z.pop()
                continue
            break
        v.append(q)
        z[-1] = s
        z.append(np.inf)
    out = [0.0] * n
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        out[q] = (q - p) * (q - p) + f[p]
    return out


def squared_distance_transform(feature: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance to the nearest True pixel (separable, linear time)."""
    cols = _column_pass(np.asarray(feature, dtype=bool))
    out = np.empty_like(cols)
    for y in range(cols.shape[0]):
        out[y] = _lower_envelope_1d(cols[y].tolist())
    return out


def distance_map(points, width: int, height: int, source_class: str | None = None) -> DistanceMap:
    """Per-pixel minimum Euclidean distance to ``points`` ((n, 2) array of (x, y))."""
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("distance_map needs at least one point")
    if pts.min() < 0 or np.any(pts[:, 0] >= width) or np.any(pts[:, 1] >= height):
        raise ValueError("point outside image bounds")
    feature = np.zeros((height, width), dtype=bool)
    feature[pts[:, 1], pts[:, 0]] = True
    return DistanceMap(np.sqrt(squared_distance_transform(feature)), source_class)


def brute_force_distance_map(points, width: int, height: int) -> np.ndarray:
    """O(HW |P|) reference used by the tests."""
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    ys, xs = np.mgrid[0:height, 0:width]
    best = np.full((height, width), np.inf)
    for px, py in pts:
        best = np.minimum(best, ((xs - px) ** 2 + (ys - py) ** 2).astype(np.float64))
    return np.sqrt(best)


def dense_class(points: PointSet) -> str:
    """Class with more sampled points; ties go to water."""
    return WATER_CLASS if len(points.water) >= len(points.nonwater) else NONWATER_CLASS


def adaptive_distance_map(points: PointSet, width: int, height: int) -> AdaptiveDistanceMap:
    """Distance map of the denser class scaled to [0, 1], oriented so water is high.

    Water-dense: ``1 - d / max(d)``; non-water-dense: ``d / max(d)``. A map
    whose maximum is 0 normalizes to zeros before orientation.
    """
    if len(points) == 0:
        raise EmptyClassError((WATER_CLASS, NONWATER_CLASS))
    cls = dense_class(points)
    src = points.water if cls == WATER_CLASS else points.nonwater
    d = distance_map(src, width, height, cls).values
    peak = d.max()
    norm = d / peak if peak > 0 else np.zeros_like(d)
    values = 1.0 - norm if cls == WATER_CLASS else norm
    return AdaptiveDistanceMap(values, cls)


def raw_distance_maps(points: PointSet, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized (D_w, D_nonwater) pair, the conventional two-map conditioning."""
    if len(points.water) == 0 or len(points.nonwater) == 0:
        raise EmptyClassError(
            tuple(n for n, p in ((WATER_CLASS, points.water), (NONWATER_CLASS, points.nonwater)) if len(p) == 0)
        )
    return (
        distance_map(points.water, width, height, WATER_CLASS).values,
        distance_map(points.nonwater, width, height, NONWATER_CLASS).values,
    )
