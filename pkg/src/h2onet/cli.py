"""Command-line entry point: ``h2onet <command> [options]``.

Commands run the pipeline stages in order::

    synth-data -> train-gan -> train-seg -> predict -> evaluate

plus ``refine``, which compares the threshold mask with both refiner
variants. Every command writes ``effective_config.json`` into its output
directory.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline as P
from . import plotting
from .config import ConfigError, PipelineConfig, load_config, write_effective
from .indices import mndwi
from .metrics import METRIC_COLUMNS
from .raster import Raster, write_raster
from .segmentation import load_segmentor, segmentor_metadata, save_segmentor
from .swir_synth import GanConfig, load_gan, save_gan
from .synth import SceneSpec, generate_dataset
from .tensor.engine import NonFiniteError

log = logging.getLogger("h2onet")

GAN_CKPT = "gan.ckpt"
SEG_CKPT = "seg.ckpt"


class CommandError(RuntimeError):
    pass


# -- helpers -----------------------------------------------------------------------------


def _config(args) -> PipelineConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "use_nir", False):
        overrides["gan.use_nir"] = True
    if getattr(args, "freeze_generator", False):
        overrides["seg.freeze_generator"] = True
    if getattr(args, "no_adaptive_dmap", False):
        overrides["refiner.adaptive"] = False
    if getattr(args, "preset", None):
        overrides["seg.preset"] = args.preset
    return load_config(args.config, overrides=overrides)


def _stats(cfg: PipelineConfig, manifest) -> dict[str, tuple[float, float]]:
    stats = manifest.band_stats()
    stats.update({k: tuple(v) for k, v in cfg.normalization.items()})
    return stats


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CommandError(f"{what} not found: {p}")
    return p


def _train_split(data_dir):
    scenes, manifest = P.load_split(data_dir, "train")
    if not scenes:
        raise CommandError(f"{data_dir} has no training scenes")
    return scenes, manifest


def _gan_config(cfg: PipelineConfig, n_train: int) -> GanConfig:
    return cfg.gan_config(P.steps_per_epoch(n_train, cfg.batch_size))


# -- commands ----------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = _config(args)
    d = cfg.data
    template = SceneSpec(width=d.width, height=d.height, seed=cfg.seed, n_blobs=d.n_blobs, n_streams=d.n_streams, n_shadows=d.n_shadows)
    template.spectral.boundary_noise_width = d.boundary_noise_width
    template.spectral.boundary_noise_std = d.boundary_noise_std
    out = P.ensure_dir(args.out_dir)
    manifest = generate_dataset(template, d.n_scenes, out, split=d.split)
    write_effective(cfg, out)
    counts = {s: len(manifest.ids(s)) for s in ("train", "val", "test")}
    log.info("wrote %d scenes to %s (%s)", d.n_scenes, out, counts)
    return 0


def cmd_train_gan(args) -> int:
    cfg = _config(args)
    _require_dir(args.data_dir, "data directory")
    scenes, manifest = _train_split(args.data_dir)
    stats = _stats(cfg, manifest)
    out = P.ensure_dir(args.out_dir)
    gcfg = _gan_config(cfg, len(scenes))
    state, rows = P.train_gan(scenes, stats, gcfg, cfg.batch_size, seed=cfg.seed)
    save_gan(out / GAN_CKPT, state, {"stats": stats, "use_nir": gcfg.use_nir})
    P.write_csv(out / "gan_losses.csv", rows, P.GAN_LOG_COLUMNS)
    plotting.loss_curves(out / "gan_losses.png", rows, P.GAN_LOG_COLUMNS[2:], "SWIR synthesis")
    write_effective(cfg, out)
    log.info("GAN trained for %d steps; pixel loss %.4g -> %.4g", state.step, rows[0]["L_G-pixel"], rows[-1]["L_G-pixel"])
    return 0


def cmd_refine(args) -> int:
    cfg = _config(args)
    _require_dir(args.data_dir, "data directory")
    scenes, _ = P.load_split(args.data_dir, None if args.split == "all" else args.split)
    if not scenes:
        raise CommandError(f"no scenes in split {args.split!r}")
    out = P.ensure_dir(args.out_dir)
    rows, variants = P.refine_comparison(scenes, cfg.refiner_config(), batch_size=args.batch)
    columns = ("method",) + METRIC_COLUMNS + ("held-out PA",)
    P.write_csv(out / "refine_report.csv", rows, columns)
    P.write_json(out / "refine_report.json", {"scenes": [s.id for s in scenes], "rows": rows})
    plotting.metrics_chart(out / "refine_metrics.png", rows, METRIC_COLUMNS, "pseudo-label quality")
    chosen = P.REFINE_ROWS[2] if cfg.refiner.adaptive else P.REFINE_ROWS[1]
    mask_dir = P.ensure_dir(out / "refined")
    for sc, labels in zip(scenes, variants[chosen]):
        write_raster(mask_dir / f"{sc.id}.h2or", P.mask_raster(labels))
    first = scenes[0]
    short = {"threshold": variants[P.REFINE_ROWS[0]][0], "two maps": variants[P.REFINE_ROWS[1]][0], "adaptive": variants[P.REFINE_ROWS[2]][0]}
    plotting.refine_panel(out / "refine_panel.png", first.raster, mndwi(first.raster).values, first.truth, short)
    write_effective(cfg, out)
    for r in rows:
        log.info("%-42s PA %.4f  mIoU %.4f  held-out PA %.4f", r["method"], r["PA"], r["mIoU"], r["held-out PA"])
    return 0


def cmd_train_seg(args) -> int:
    """Staged schedule: GAN warmup, adversarial, then joint segmentation training.

    With ``--gan-checkpoint`` the first two stages are skipped and the
    generator starts from the checkpoint.
    """
    cfg = _config(args)
    _require_dir(args.data_dir, "data directory")
    scenes, manifest = _train_split(args.data_dir)
    stats = _stats(cfg, manifest)
    out = P.ensure_dir(args.out_dir)
    spe = P.steps_per_epoch(len(scenes), cfg.batch_size)
    scfg = cfg.seg_config(spe)
    gcfg = _gan_config(cfg, len(scenes))
    gan_state = None
    if scfg.uses_swir:
        if args.gan_checkpoint:
            ckpt = Path(args.gan_checkpoint)
            if ckpt.is_dir():
                ckpt = ckpt / GAN_CKPT
            if not ckpt.exists():
                raise CommandError(f"GAN checkpoint not found: {ckpt}")
            gan_state = load_gan(ckpt, gcfg)
        else:
            gan_state, gan_rows = P.train_gan(scenes, stats, gcfg, cfg.batch_size, seed=cfg.seed)
            P.write_csv(out / "gan_losses.csv", gan_rows, P.GAN_LOG_COLUMNS)
            plotting.loss_curves(out / "gan_losses.png", gan_rows, P.GAN_LOG_COLUMNS[2:], "SWIR synthesis")
    state, rows = P.train_segmentor(scenes, stats, scfg, gan_state, cfg.batch_size, cfg.gan.use_nir, seed=cfg.seed)
    meta = {"stats": stats, "use_nir": cfg.gan.use_nir}
    save_segmentor(out / SEG_CKPT, state, meta)
    if gan_state is not None:
        save_gan(out / GAN_CKPT, gan_state, meta)
    P.write_csv(out / "seg_losses.csv", rows, P.SEG_LOG_COLUMNS)
    plotting.loss_curves(out / "seg_losses.png", rows, ("L_S",), f"segmentation ({scfg.preset})")
    write_effective(cfg, out)
    if rows:
        log.info("segmentor (%s) trained for %d steps; loss %.4g -> %.4g", scfg.preset, state.step, rows[0]["L_S"], rows[-1]["L_S"])
    return 0


def cmd_predict(args) -> int:
    cfg = _config(args)
    model_dir = _require_dir(args.model_dir, "model directory")
    seg_path = model_dir / SEG_CKPT
    if not seg_path.exists():
        raise CommandError(f"no {SEG_CKPT} in {model_dir}")
    meta = segmentor_metadata(seg_path)
    use_nir = bool(meta.get("use_nir", False))
    stats = {k: tuple(v) for k, v in meta["stats"].items()}
    scfg = replace(cfg.seg_config(1), preset=meta["preset"])
    seg_state = load_segmentor(seg_path, scfg)
    generator = None
    if scfg.uses_swir:
        gcfg = replace(cfg.gan_config(1), use_nir=use_nir)
        generator = load_gan(model_dir / GAN_CKPT, gcfg).generator

    scenes, _ = P.load_split(_require_dir(args.data_dir, "data directory"), None if args.split == "all" else args.split)
    if not scenes:
        raise CommandError(f"no scenes in split {args.split!r}")
    out = P.ensure_dir(args.out_dir)
    prob_dir, png_dir = P.ensure_dir(out / "prob"), P.ensure_dir(out / "png")
    for i, sc in enumerate(scenes):
        p = P.predict_raster(sc.raster, stats, generator, seg_state, cfg.tile_size, use_nir)
        labels = (p >= 0.5).astype(np.int8)
        write_raster(out / f"{sc.id}.h2or", P.mask_raster(labels))
        write_raster(prob_dir / f"{sc.id}.h2or", Raster(sc.raster.width, sc.raster.height, {"P_WATER": p}))
        plotting.save_mask_png(png_dir / f"{sc.id}.png", labels)
        if i == 0:
            s_tilde = None if generator is None else P.synthesize_raster(sc.raster, stats, generator, use_nir)
            plotting.prediction_panel(out / "prediction_panel.png", sc.raster, s_tilde, p, sc.truth)
    write_effective(cfg, out)
    log.info("wrote %d predictions to %s", len(scenes), out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    pred_dir = _require_dir(args.pred_dir, "prediction directory")
    truth_dir = _require_dir(args.truth_dir, "truth directory")
    out = P.ensure_dir(args.out_dir)
    pooled, per_scene = P.evaluate_dirs(pred_dir, truth_dir)
    row = {"method": args.label, **pooled}
    P.write_json(out / "metrics.json", {"pooled": row, "scenes": per_scene})
    P.write_csv(out / "metrics.csv", [row], ("method",) + METRIC_COLUMNS)
    P.write_csv(out / "per_scene.csv", per_scene, ("id",) + METRIC_COLUMNS)
    plotting.metrics_chart(out / "metrics.png", [row], METRIC_COLUMNS, "segmentation")
    write_effective(cfg, out)
    log.info("PA %.4f  mIoU %.4f  FW-IoU %.4f over %d scenes", pooled["PA"], pooled["mIoU"], pooled["FW-IoU"], len(per_scene))
    return 0


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out-dir", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (set before numpy loads when run as a module)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="h2onet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="generate a synthetic dataset")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-gan", parents=[common], help="train SWIR synthesis")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--use-nir", action="store_true", help="feed NIR to the generator as a 4th channel")
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("refine", parents=[common], help="refine MNDWI masks and compare with the threshold")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", default="all", choices=("all", "train", "val", "test"))
    p.add_argument("--batch", type=int, default=1, help="images per refiner run")
    p.add_argument("--no-adaptive-dmap", action="store_true", help="export the two-raw-maps variant")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("train-seg", parents=[common], help="staged GAN + segmentation training")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--gan-checkpoint", help="GAN checkpoint file or train-gan output directory")
    p.add_argument("--preset", choices=("h2onet", "unet_refined", "unet"))
    p.add_argument("--freeze-generator", action="store_true")
    p.add_argument("--use-nir", action="store_true")
    p.add_argument("--no-adaptive-dmap", action="store_true", help="refine targets with the two-raw-maps input")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("predict", parents=[common], help="predict water masks")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--model-dir", required=True, help="train-seg output directory")
    p.add_argument("--split", default="test", choices=("all", "train", "val", "test"))
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score predicted masks against truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--truth-dir", required=True)
    p.add_argument("--label", default="H2O-Net", help="method name in the report")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    except NonFiniteError as exc:
        log.error("aborted: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
