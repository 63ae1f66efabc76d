"""Pipeline configuration: nested dataclasses loaded from JSON, validated, overridable from the environment.

Environment variables named ``H2ONET_<SECTION>__<KEY>`` override single
values, e.g. ``H2ONET_GAN__LR_G=1e-3`` or ``H2ONET_SEED=3``. Values are
parsed as JSON where possible and fall back to plain strings.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .distmap import Thresholds
from .refiner import RefinerConfig
from .segmentation import PRESETS, SegConfig
from .swir_synth import GanConfig, LossWeights
from .tensor.checkpoint import atomic_write_bytes

ENV_PREFIX = "H2ONET_"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    n_scenes: int = 24
    width: int = 32
    height: int = 32
    n_blobs: int = 2
    n_streams: int = 1
    n_shadows: int = 0
    boundary_noise_width: int = 2
    boundary_noise_std: float = 0.08
    split: tuple = (0.9, 0.05, 0.05)


@dataclass
class RefinerSection:
    k_iterations: int = 200
    lr: float = 1e-2
    max_per_class: int = 1024
    width: int = 16
    adaptive: bool = True
    coarse_threshold: float = 0.35


@dataclass
class GanSection:
    lr_g: float = 2e-4
    lr_d: float = 6e-4
    base_g: int = 16
    base_d: int = 8
    dropout: float = 0.2
    use_nir: bool = False
    warmup_epochs: int = 1
    adversarial_epochs: int = 1


@dataclass
class SegSection:
    preset: str = "h2onet"
    lr: float = 1e-3
    lr_generator: float = 2e-4
    base: int = 8
    max_width: int = 64
    joint_epochs: int = 2
    freeze_generator: bool = False
    cache_targets: bool = True


@dataclass
class PipelineConfig:
    seed: int = 0
    batch_size: int = 8
    tile_size: int = 64
    data: DataSection = field(default_factory=DataSection)
    thresholds: Thresholds = field(default_factory=Thresholds)
    refiner: RefinerSection = field(default_factory=RefinerSection)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    gan: GanSection = field(default_factory=GanSection)
    seg: SegSection = field(default_factory=SegSection)
    # band -> [mean, std]; empty means "use the dataset manifest statistics"
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    # -- views consumed by the modules --------------------------------------------

    def refiner_config(self, adaptive: bool | None = None) -> RefinerConfig:
        r = self.refiner
        return RefinerConfig(
            k_iterations=r.k_iterations,
            lr=r.lr,
            thresholds=self.thresholds,
            seed=self.seed,
            max_per_class=r.max_per_class,
            width=r.width,
            adaptive=r.adaptive if adaptive is None else adaptive,
            coarse_threshold=r.coarse_threshold,
        )

    def gan_config(self, steps_per_epoch: int) -> GanConfig:
        g = self.gan
        warmup = g.warmup_epochs * steps_per_epoch
        return GanConfig(
            lr_g=g.lr_g,
            lr_d=g.lr_d,
            warmup_steps=warmup,
            total_steps=max(warmup + g.adversarial_epochs * steps_per_epoch, 1),
            weights=self.loss_weights,
            base_g=g.base_g,
            base_d=g.base_d,
            dropout=g.dropout,
            use_nir=g.use_nir,
            seed=self.seed,
        )

    def seg_config(self, steps_per_epoch: int, preset: str | None = None) -> SegConfig:
        s = self.seg
        return SegConfig(
            preset=preset or s.preset,
            lr=s.lr,
            lr_generator=s.lr_generator,
            total_steps=max(s.joint_epochs * steps_per_epoch, 1),
            base=s.base,
            max_width=s.max_width,
            freeze_generator=s.freeze_generator,
            cache_targets=s.cache_targets,
            coarse_threshold=self.refiner.coarse_threshold,
            refiner=self.refiner_config(),
            seed=self.seed,
        )


def validate(cfg: PipelineConfig) -> None:
    problems = []
    if cfg.batch_size < 1:
        problems.append("batch_size must be >= 1")
    if cfg.tile_size < 32 or cfg.tile_size % 32:
        problems.append("tile_size must be a positive multiple of 32")
    d = cfg.data
    if d.n_scenes < 1 or d.width < 8 or d.height < 8:
        problems.append("data needs n_scenes >= 1 and width/height >= 8")
    if len(d.split) != 3 or abs(sum(d.split) - 1.0) > 1e-9 or min(d.split) < 0:
        problems.append("data.split must be three non-negative fractions summing to 1")
    if cfg.refiner.k_iterations < 1:
        problems.append("refiner.k_iterations must be >= 1")
    if cfg.seg.preset not in PRESETS:
        problems.append(f"seg.preset must be one of {sorted(PRESETS)}")
    for name in ("warmup_epochs", "adversarial_epochs"):
        if getattr(cfg.gan, name) < 0:
            problems.append(f"gan.{name} must be >= 0")
    if cfg.seg.joint_epochs < 0:
        problems.append("seg.joint_epochs must be >= 0")
    for band, v in cfg.normalization.items():
        if not (isinstance(v, (list, tuple)) and len(v) == 2 and v[1] > 0):
            problems.append(f"normalization[{band!r}] must be [mean, std] with std > 0")
    if problems:
        raise ConfigError("; ".join(problems))


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table, got {type(value).__name__}")
        return _build(tp, value, where + ".")
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table, got {value!r}")
        return {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
    return value


def _build(cls, data: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{where}{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data)


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env(data: dict, environ: typing.Mapping[str, str] | None = None) -> dict:
    """Return a copy of ``data`` with ``H2ONET_A__B=value`` overrides applied."""
    environ = os.environ if environ is None else environ
    out = json.loads(json.dumps(data))
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not path:
            continue
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {part} is not a table")
        node[path[-1]] = _parse_env_value(raw)
    return out


def load_config(path: str | os.PathLike | None = None, environ=None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the JSON file, then environment overrides, then explicit ``overrides``."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be an object")
    data = apply_env(data, environ)
    for k, v in (overrides or {}).items():
        node = data
        *parents, leaf = k.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = v
    return from_dict(data)


def write_effective(cfg: PipelineConfig, out_dir: str | os.PathLike, name: str = "effective_config.json") -> Path:
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, (cfg.to_json() + "\n").encode())
    return path
