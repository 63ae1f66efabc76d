"""Seeded synthetic multiband scenes with exact water masks."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .distmap import squared_distance_transform
from .indices import LAND, WATER
from .raster import SPECTRAL_BANDS, Raster, band_statistics, read_raster, write_raster
from .tensor.checkpoint import atomic_write_bytes

# (R, G, B, NIR, SWIR2) reflectance means and per-pixel standard deviations
WATER_MEAN = (0.04, 0.15, 0.09, 0.03, 0.04)
WATER_STD = (0.008, 0.012, 0.01, 0.008, 0.008)
VEGETATION_MEAN = (0.05, 0.09, 0.04, 0.38, 0.32)
SOIL_MEAN = (0.19, 0.16, 0.12, 0.28, 0.46)
LAND_STD = (0.015, 0.015, 0.012, 0.03, 0.03)
SHADOW_FACTOR = 0.3


@dataclass
class SpectralModel:
    water_mean: tuple = WATER_MEAN
    water_std: tuple = WATER_STD
    vegetation_mean: tuple = VEGETATION_MEAN
    soil_mean: tuple = SOIL_MEAN
    land_std: tuple = LAND_STD
    illumination_jitter: float = 0.1
    boundary_noise_width: int = 0
    boundary_noise_std: float = 0.08


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    seed: int = 0
    n_blobs: int = 2
    blob_radius: tuple = (0.12, 0.3)  # fraction of the shorter side
    n_streams: int = 1
    stream_width: tuple = (0.04, 0.1)
    meander_amplitude: tuple = (0.05, 0.2)
    meander_wavelength: tuple = (0.5, 1.5)
    spectral: SpectralModel = field(default_factory=SpectralModel)
    n_shadows: int = 0
    shadow_radius: tuple = (0.08, 0.18)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        spectral = SpectralModel(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("spectral", {}).items()})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(spectral=spectral, **d)


@dataclass
class LabeledScene:
    raster: Raster
    truth: np.ndarray  # int8 WATER/LAND
    boundary_band: np.ndarray  # bool, pixels eligible for boundary noise
    shadows: np.ndarray  # bool


def _water_geometry(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    side = min(h, w)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    water = np.zeros((h, w), dtype=bool)
    for _ in range(spec.n_blobs):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(*spec.blob_radius) * side
        lobes, phase, wobble = rng.integers(2, 6), rng.uniform(0, 2 * math.pi), rng.uniform(0.05, 0.25)
        theta = np.arctan2(ys - cy, xs - cx)
        radius = r * (1.0 + wobble * np.sin(lobes * theta + phase))
        water |= np.hypot(xs - cx, ys - cy) <= radius
    for _ in range(spec.n_streams):
        angle = rng.uniform(0, math.pi)
        cx, cy = rng.uniform(0.25 * w, 0.75 * w), rng.uniform(0.25 * h, 0.75 * h)
        amp = rng.uniform(*spec.meander_amplitude) * side
        wavelength = rng.uniform(*spec.meander_wavelength) * side
        half = 0.5 * rng.uniform(*spec.stream_width) * side
        phase = rng.uniform(0, 2 * math.pi)
        along = (xs - cx) * math.cos(angle) + (ys - cy) * math.sin(angle)
        across = -(xs - cx) * math.sin(angle) + (ys - cy) * math.cos(angle)
        centre = amp * np.sin(2 * math.pi * along / wavelength + phase)
        water |= np.abs(across - centre) <= max(half, 0.5)
    return water


def _smooth_field(h: int, w: int, rng: np.random.Generator, scale: float) -> np.ndarray:
    """Low-frequency field in [0, 1] from a few random sinusoids."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    acc = np.zeros((h, w))
    for _ in range(4):
        fx, fy = rng.normal(0, 1.0 / scale, size=2)
        acc += np.sin(2 * math.pi * (fx * xs + fy * ys) + rng.uniform(0, 2 * math.pi))
    return 0.5 + 0.5 * np.tanh(acc)


def boundary_band(truth: np.ndarray, width: int) -> np.ndarray:
    """Pixels within ``width`` (Euclidean) of a pixel of the other class."""
    band = np.zeros(truth.shape, dtype=bool)
    if width <= 0:
        return band
    water = truth == WATER
    if water.any() and (~water).any():
        band |= water & (squared_distance_transform(~water) <= width * width)
        band |= ~water & (squared_distance_transform(water) <= width * width)
    return band


def generate_scene(spec: SceneSpec) -> LabeledScene:
    """Draw water bodies, then per-class spectra, then optional boundary noise and shadows.

    Each stage uses its own seeded stream, so toggling boundary noise or
    shadows leaves every other pixel value unchanged.
    """
    geo_ss, spec_ss, noise_ss, shadow_ss = np.random.SeedSequence(spec.seed).spawn(4)
    geo_rng = np.random.default_rng(geo_ss)
    spec_rng = np.random.default_rng(spec_ss)
    h, w = spec.height, spec.width
    sm = spec.spectral

    water = _water_geometry(spec, geo_rng)
    truth = np.where(water, WATER, LAND).astype(np.int8)

    veg_share = _smooth_field(h, w, spec_rng, scale=0.4 * min(h, w))
    illum = 1.0 + spec_rng.uniform(-sm.illumination_jitter, sm.illumination_jitter)
    planes = {}
    for b, name in enumerate(SPECTRAL_BANDS):
        land_mu = veg_share * sm.vegetation_mean[b] + (1 - veg_share) * sm.soil_mean[b]
        land = land_mu + spec_rng.normal(0, sm.land_std[b], size=(h, w))
        wat = sm.water_mean[b] + spec_rng.normal(0, sm.water_std[b], size=(h, w))
        planes[name] = np.where(water, wat, land) * illum

    band = boundary_band(truth, sm.boundary_noise_width)
    if sm.boundary_noise_width > 0:
        noise_rng = np.random.default_rng(noise_ss)
        for name in SPECTRAL_BANDS:
            noise = noise_rng.normal(0, sm.boundary_noise_std, size=(h, w))
            planes[name] = np.where(band, planes[name] + noise, planes[name])

    shadows = np.zeros((h, w), dtype=bool)
    if spec.n_shadows:
        srng = np.random.default_rng(shadow_ss)
        ys, xs = np.mgrid[0:h, 0:w]
        for _ in range(spec.n_shadows):
            cx, cy = srng.uniform(0, w), srng.uniform(0, h)
            r = srng.uniform(*spec.shadow_radius) * min(h, w)
            shadows |= np.hypot(xs - cx, ys - cy) <= r
        shadows &= ~water
        for name in SPECTRAL_BANDS:
            planes[name] = np.where(shadows, planes[name] * SHADOW_FACTOR, planes[name])

    for name in SPECTRAL_BANDS:
        planes[name] = np.clip(planes[name], 1e-3, 1.0)
    return LabeledScene(Raster(w, h, planes), truth, band, shadows)


# -- datasets --------------------------------------------------------------------------


def split_counts(n: int, fractions=(0.9, 0.05, 0.05)) -> tuple[int, int, int]:
    """Validation and test sizes are floored; the remainder goes to training."""
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    n_val = int(math.floor(n * fractions[1] + 1e-9))
    n_test = int(math.floor(n * fractions[2] + 1e-9))
    return n - n_val - n_test, n_val, n_test


@dataclass
class SceneEntry:
    id: str
    split: str
    image: str
    truth: str


@dataclass
class Manifest:
    scenes: list[SceneEntry]
    stats: dict[str, list[float]]
    template: dict
    version: int = 1

    def __post_init__(self):
        # JSON form, so a written and re-read manifest compares equal
        self.template = json.loads(json.dumps(self.template))

    def ids(self, split: str | None = None) -> list[str]:
        return [s.id for s in self.scenes if split is None or s.split == split]

    def entries(self, split: str | None = None) -> list[SceneEntry]:
        return [s for s in self.scenes if split is None or s.split == split]

    def band_stats(self) -> dict[str, tuple[float, float]]:
        return {k: (float(v[0]), float(v[1])) for k, v in self.stats.items()}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        d = json.loads(text)
        return cls(
            scenes=[SceneEntry(**s) for s in d["scenes"]],
            stats={k: list(v) for k, v in d["stats"].items()},
            template=d["template"],
            version=d["version"],
        )


def write_manifest(path, manifest: Manifest) -> None:
    atomic_write_bytes(path, manifest.to_json().encode())


def read_manifest(path) -> Manifest:
    return Manifest.from_json(Path(path).read_text())


def truth_raster(truth: np.ndarray) -> Raster:
    h, w = truth.shape
    return Raster(w, h, {"MASK": truth.astype(np.float64)}, nodata=-1.0)


def generate_dataset(template: SceneSpec, n: int, out_dir: str | os.PathLike, split=(0.9, 0.05, 0.05)) -> Manifest:
    """Write ``n`` scenes plus ``manifest.json``; band statistics come from the training split."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    n_train, n_val, _ = split_counts(n, split)
    order = np.random.default_rng([template.seed, 7]).permutation(n)
    split_of = {}
    for rank, i in enumerate(order):
        split_of[int(i)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    entries, train_rasters = [], []
    for i in range(n):
        spec = SceneSpec.from_dict({**template.to_dict(), "seed": int(np.random.SeedSequence([template.seed, i]).generate_state(1)[0])})
        scene = generate_scene(spec)
        sid = f"scene_{i:04d}"
        write_raster(out / "images" / f"{sid}.h2or", scene.raster)
        write_raster(out / "truth" / f"{sid}.h2or", truth_raster(scene.truth))
        entries.append(SceneEntry(sid, split_of[i], f"images/{sid}.h2or", f"truth/{sid}.h2or"))
        if split_of[i] == "train":
            train_rasters.append(scene.raster)
    stats = band_statistics(train_rasters or [generate_scene(template).raster])
    manifest = Manifest(entries, {k: [v[0], v[1]] for k, v in stats.items()}, template.to_dict())
    write_manifest(out / "manifest.json", manifest)
    return manifest


def load_truth(path) -> np.ndarray:
    return read_raster(path).band("MASK").astype(np.int8)
