"""Dataset loading, staged training loops, tiled prediction and evaluation over directories."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .indices import IGNORE, IndexMap, mndwi, threshold_mask
from .metrics import METRIC_COLUMNS, ConfusionMatrix, accumulate, report
from .raster import Raster, read_raster, write_raster
from .refiner import held_out_accuracy, refine_batch
from .segmentation import SegBatch, SegConfig, SegState, predict_tile, train_joint_step
from .swir_synth import GanConfig, GanState, gan_arrays, input_bands, synthesize, train_gan_step
from .synth import Manifest, load_truth, read_manifest
from .tensor.checkpoint import atomic_write_bytes

GAN_LOG_COLUMNS = ("step", "lr", "L_G-pixel", "L_G-adv", "L_D", "L_F")
SEG_LOG_COLUMNS = ("step", "lr", "L_S")


@dataclass
class Scene:
    id: str
    raster: Raster
    truth: np.ndarray | None = None


def load_split(data_dir, split: str | None = "train") -> tuple[list[Scene], Manifest]:
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    manifest = read_manifest(manifest_path)
    scenes = []
    for e in manifest.entries(split):
        scenes.append(Scene(e.id, read_raster(data_dir / e.image), load_truth(data_dir / e.truth)))
    return scenes, manifest


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of shuffled index batches; the last short batch is kept."""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(-(-n // batch_size), 1)


# -- training ----------------------------------------------------------------------------


def train_gan(scenes: list[Scene], stats, config: GanConfig, batch_size: int, seed: int = 0, state: GanState | None = None):
    """Run ``config.total_steps`` GAN steps over shuffled epochs. Returns (state, log rows)."""
    x, s = gan_arrays([sc.raster for sc in scenes], stats, config.use_nir)
    state = state or GanState(config)
    if state.step == 0:
        state.generator.set_output_stats(*stats["SWIR2"])
    rng = np.random.default_rng([seed, 11])
    rows = []
    while state.step < config.total_steps:
        for idx in batches(len(scenes), batch_size, rng):
            if state.step >= config.total_steps:
                break
            rows.append(train_gan_step((x[idx], s[idx]), state))
    return state, rows


def seg_inputs(scenes: list[Scene], stats, use_nir: bool) -> np.ndarray:
    return np.stack([sc.raster.normalized(stats, input_bands(use_nir)) for sc in scenes])


def train_segmentor(
    scenes: list[Scene],
    stats,
    config: SegConfig,
    gan_state: GanState | None,
    batch_size: int,
    use_nir: bool = False,
    seed: int = 0,
):
    """Joint (or RGB-only) segmentation training. Returns (state, log rows)."""
    x = seg_inputs(scenes, stats, use_nir)
    index_maps = [mndwi(sc.raster) for sc in scenes]
    state = SegState(config, tuple(stats["SWIR2"]))
    rng = np.random.default_rng([seed, 13])
    rows = []
    while state.step < config.total_steps:
        for idx in batches(len(scenes), batch_size, rng):
            if state.step >= config.total_steps:
                break
            batch = SegBatch(x[idx], [index_maps[i] for i in idx], [scenes[i].id for i in idx])
            rows.append(train_joint_step(batch, gan_state, state))
    return state, rows


# -- prediction --------------------------------------------------------------------------


def _pad_to(plane_stack: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    _, h, w = plane_stack.shape
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        plane_stack = np.pad(plane_stack, ((0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge")
    return plane_stack, (h, w)


def predict_raster(raster: Raster, stats, generator, seg_state: SegState, tile_size: int, use_nir: bool = False) -> np.ndarray:
    """Water probability plane for one raster, predicted tile by tile on a padded grid."""
    x, (h, w) = _pad_to(raster.normalized(stats, input_bands(use_nir)), 32)
    gen = generator if seg_state.config.uses_swir else None
    out = np.zeros(x.shape[1:])
    hp, wp = x.shape[1:]
    for y0 in range(0, hp, tile_size):
        for x0 in range(0, wp, tile_size):
            tile = x[:, y0 : y0 + tile_size, x0 : x0 + tile_size]
            tile, (th, tw) = _pad_to(tile, 32)
            p = predict_tile(tile, gen, seg_state.net, seg_state.swir_stats).probabilities.data[0, 0]
            out[y0 : y0 + th, x0 : x0 + tw] = p[:th, :tw]
    return out[:h, :w]


def synthesize_raster(raster: Raster, stats, generator, use_nir: bool = False) -> np.ndarray:
    """Synthesized SWIR2 plane for a whole raster (padded to the generator's multiple, then cropped)."""
    x, (h, w) = _pad_to(raster.normalized(stats, input_bands(use_nir)), 8)
    return synthesize(generator, x[None])[0, 0, :h, :w]


# -- evaluation --------------------------------------------------------------------------


def evaluate_dirs(pred_dir, truth_dir) -> tuple[dict[str, float], list[dict]]:
    """Score every ``<id>.h2or`` mask directly inside ``pred_dir`` against ``truth_dir/<id>.h2or``.

    Returns the pooled metrics and a per-scene list.
    """
    pred_dir, truth_dir = Path(pred_dir), Path(truth_dir)
    preds = sorted(pred_dir.glob("*.h2or"))
    if not preds:
        raise FileNotFoundError(f"no predicted masks in {pred_dir}")
    total = ConfusionMatrix()
    per_scene = []
    for p in preds:
        t = truth_dir / p.name
        if not t.exists():
            raise FileNotFoundError(f"no truth for {p.stem} in {truth_dir}")
        truth = _mask_plane(read_raster(t))
        pred = _mask_plane(read_raster(p))
        if pred.shape != truth.shape:
            raise ValueError(f"{t.stem}: prediction {pred.shape} vs truth {truth.shape}")
        pred = np.where(pred == IGNORE, 0, pred)
        cm = accumulate(ConfusionMatrix(), pred, truth)
        total = total + cm
        per_scene.append({"id": t.stem, **report(cm)})
    return report(total), per_scene


def _mask_plane(r: Raster) -> np.ndarray:
    name = "MASK" if "MASK" in r.bands else r.band_names[0]
    return r.band(name).astype(np.int8)


def mask_raster(labels: np.ndarray) -> Raster:
    h, w = labels.shape
    return Raster(w, h, {"MASK": labels.astype(np.float64)}, nodata=float(IGNORE))


# -- refinement comparison ---------------------------------------------------------------


REFINE_ROWS = ("Threshold (MNDWI)", "Refiner (without adaptive distance maps)", "Refiner")


def refine_comparison(scenes: list[Scene], refiner_config, batch_size: int = 1) -> tuple[list[dict], dict]:
    """Threshold vs ablation vs adaptive refiner on the same scenes.

    Each scene is scored on all pixels (PA/mIoU/FW-IoU against truth) and on
    held-out pixels, the ones the refiner was not supervised on. Returns the
    report rows and the per-variant label planes.
    """
    from dataclasses import replace

    index_maps = [mndwi(sc.raster) for sc in scenes]
    coarse = [threshold_mask(ix, refiner_config.coarse_threshold).labels for ix in index_maps]
    variants = {REFINE_ROWS[0]: coarse}
    points = [None] * len(scenes)
    for name, adaptive in ((REFINE_ROWS[1], False), (REFINE_ROWS[2], True)):
        cfg = replace(refiner_config, adaptive=adaptive)
        labels = []
        for start in range(0, len(scenes), batch_size):
            chunk = index_maps[start : start + batch_size]
            for j, r in enumerate(refine_batch(chunk, cfg)):
                labels.append(np.where(r.labels == IGNORE, 0, r.labels))
                if adaptive:
                    points[start + j] = r.points
        variants[name] = labels
    rows = []
    for name, labels in variants.items():
        cm = ConfusionMatrix()
        held = []
        for sc, lab, pts in zip(scenes, labels, points):
            cm = accumulate(cm, lab, sc.truth)
            held.append(held_out_accuracy(lab, sc.truth, pts))
        rows.append({"method": name, **report(cm), "held-out PA": float(np.mean(held))})
    return rows, variants


# -- reports -----------------------------------------------------------------------------


def write_csv(path, rows: list[dict], columns) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(r.get(k)) for k in columns})
    atomic_write_bytes(path, buf.getvalue().encode())


def _fmt(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else repr(v)
    return v


def write_json(path, payload) -> None:
    atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n").encode())


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def metric_rows(results: dict[str, dict[str, float]]) -> list[dict]:
    return [{"method": name, **{c: m[c] for c in METRIC_COLUMNS}} for name, m in results.items()]


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
