"""Experiment configuration: nested dataclasses loaded from JSON or TOML."""

from __future__ import annotations

import copy
import dataclasses
import json
import sys
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .masking import BUCKETS, REGULAR_BUCKET
from .stage1 import Stage1Config
from .stage2 import LossConfig, Stage2Config

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PRESETS = ("l1_only", "l1_adv", "full_dft")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = ""
    manifest: str = ""  # existing JSON-lines manifest; empty -> split ``root``
    image_size: int = 64
    center_crop: bool = False
    split: tuple = (0.8, 0.1, 0.1)


@dataclass
class MaskConfig:
    mode: str = "regular"  # "regular" | "irregular"
    ratio: float = 0.25
    bucket: str = ""  # irregular training bucket; empty -> every bucket
    mask_dir: str = ""  # folder of mask PNGs (white = hole); empty -> synthetic strokes
    augment: bool = True
    synthetic_count: int = 200


@dataclass
class EvalConfig:
    split: str = "test"
    buckets: tuple = (REGULAR_BUCKET,)
    hole_only: bool = False
    grid_rows: int = 8


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/experiment"
    preset: str = "full_dft"
    data: DataConfig = field(default_factory=DataConfig)
    masks: MaskConfig = field(default_factory=MaskConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    losses: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def derive_seed(root: int, component: str) -> int:
    """Deterministic per-component seed split from the root seed."""
    seq = np.random.SeedSequence([int(root), zlib.crc32(component.encode())])
    return int(seq.generate_state(1)[0] % (2 ** 31))


def _build(cls, values: dict, prefix: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a table of keys")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        name = f"{prefix}.{key}" if prefix else key
        if key not in fields:
            raise ConfigError(f"{name}: unknown key")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, name)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{name}: expected a list")
            kwargs[key] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{name}: expected true/false")
            kwargs[key] = value
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}: expected a number")
            kwargs[key] = type(default)(value) if isinstance(default, float) or float(value).is_integer() \
                else value
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{name}: expected a string")
            kwargs[key] = value
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(values: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, values, "")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    text = path.read_text()
    try:
        values = tomllib.loads(text) if path.suffix.lower() == ".toml" else json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(values)


def apply_preset(cfg: ExperimentConfig, preset: Optional[str] = None) -> ExperimentConfig:
    """Copy of ``cfg`` with the ablation arm applied.

    Arms differ only in the guide planes and the adversarial weight:
    ``l1_only`` (no guide, no critic), ``l1_adv`` (no guide), ``full_dft``.
    """
    cfg = copy.deepcopy(cfg)
    cfg.preset = preset or cfg.preset
    if cfg.preset not in PRESETS:
        raise ConfigError(f"preset: must be one of {', '.join(PRESETS)}")
    if cfg.preset == "l1_only":
        cfg.losses.adv_weight = 0.0
    elif cfg.losses.adv_weight <= 0:
        raise ConfigError(f"losses.adv_weight: preset {cfg.preset} needs a positive adversarial weight")
    cfg.stage2.use_guide = cfg.preset == "full_dft"
    return cfg


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Apply the preset and the root-seed split, then validate."""
    cfg = apply_preset(cfg)
    cfg.stage1.seed = derive_seed(cfg.seed, "stage1")
    cfg.stage2.seed = derive_seed(cfg.seed, "stage2")
    validate(cfg)
    return cfg


def seed_record(cfg: ExperimentConfig) -> dict:
    return {"root": cfg.seed, "stage1": cfg.stage1.seed, "stage2": cfg.stage2.seed,
            "split": derive_seed(cfg.seed, "split"), "eval": derive_seed(cfg.seed, "eval")}


def validate(cfg: ExperimentConfig, need_data: bool = True) -> None:
    if need_data:
        if not cfg.data.root and not cfg.data.manifest:
            raise ConfigError("data.root: a dataset path (or data.manifest) is required")
        if cfg.data.manifest and not Path(cfg.data.manifest).is_file():
            raise ConfigError(f"data.manifest: {cfg.data.manifest} not found")
        if cfg.data.root and not Path(cfg.data.root).is_dir():
            raise ConfigError(f"data.root: {cfg.data.root} is not a directory")
    if len(cfg.data.split) != 3 or abs(sum(cfg.data.split) - 1) > 1e-9:
        raise ConfigError("data.split: three fractions summing to 1 required")
    if cfg.data.image_size < 16:
        raise ConfigError("data.image_size: must be at least 16")
    if cfg.masks.mode not in ("regular", "irregular"):
        raise ConfigError("masks.mode: must be 'regular' or 'irregular'")
    if not 0 < cfg.masks.ratio <= 1:
        raise ConfigError("masks.ratio: must be in (0, 1]")
    if cfg.masks.bucket and cfg.masks.bucket not in BUCKETS:
        raise ConfigError(f"masks.bucket: unknown bucket {cfg.masks.bucket!r}")
    if cfg.masks.mask_dir and not Path(cfg.masks.mask_dir).is_dir():
        raise ConfigError(f"masks.mask_dir: {cfg.masks.mask_dir} is not a directory")
    for b in cfg.eval.buckets:
        if b not in BUCKETS and b not in (REGULAR_BUCKET, "paired"):
            raise ConfigError(f"eval.buckets: unknown bucket {b!r}")
    for name, sub in (("stage1", cfg.stage1), ("stage2", cfg.stage2), ("losses", cfg.losses)):
        try:
            sub.validate()
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from exc
