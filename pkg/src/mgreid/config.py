"""Run configuration: dataclasses, validation, and the INI-style config file.

Precedence is defaults < config file < command-line flags. The config file is a
plain ``configparser`` INI file whose sections mirror the dataclasses below::

    [data]
    num_ids = 20
    samples_per_id = 10

    [train]
    s1_epochs = 30

Values are parsed as JSON when possible (numbers, booleans, lists) and kept as
strings otherwise.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

PARTS = ("head", "upper", "legs")
GRANULARITIES = ("global", "head", "upper", "legs")
GRANULARITY_LETTERS = {"G": "global", "H": "head", "U": "upper", "L": "legs"}
MASK_SOURCES = ("predicted", "external", "stripe", "none")


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


@dataclass
class GenConfig:
    num_ids: int = 20
    samples_per_id: int = 10
    num_cameras: int = 2
    num_domains: int = 2
    image_height: int = 64
    image_width: int = 32
    patch_size: int = 8
    seed: int = 0
    oversize_rate: float = 0.1
    oversplit_rate: float = 0.05
    # -1 selects the last domain as the held-out (query/gallery) domain
    heldout_domain: int = -1

    def validate(self) -> None:
        if self.num_ids < 2:
            raise ConfigError("num_ids must be >= 2")
        if self.samples_per_id < 2:
            raise ConfigError("samples_per_id must be >= 2")
        if self.num_cameras < 1 or self.num_domains < 1:
            raise ConfigError("num_cameras and num_domains must be >= 1")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"image dims {self.image_height}x{self.image_width} not divisible "
                f"by patch size {self.patch_size}"
            )
        for name in ("oversize_rate", "oversplit_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {rate}")
        if self.oversize_rate + self.oversplit_rate > 1.0:
            raise ConfigError("oversize_rate + oversplit_rate must be <= 1")
        if not -1 <= self.heldout_domain < self.num_domains:
            raise ConfigError("heldout_domain out of range")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size


@dataclass
class CalibPolicy:
    """Plausibility intervals for part boxes and the stripe windows used as fallback.

    Intervals are fractions of the image height; stripes span the full width.
    """

    height_range: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {
            "head": (0.05, 0.45),
            "upper": (0.15, 0.70),
            "legs": (0.15, 0.70),
        }
    )
    max_area: float = 0.9
    stripes: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {
            "head": (0.0, 0.30),
            "upper": (0.25, 0.65),
            "legs": (0.60, 1.00),
        }
    )

    def validate(self) -> None:
        for part in PARTS:
            lo, hi = self.height_range[part]
            if not 0.0 <= lo < hi <= 1.0:
                raise ConfigError(f"bad height range for {part}: {(lo, hi)}")
            s_lo, s_hi = self.stripes[part]
            if not 0.0 <= s_lo < s_hi <= 1.0:
                raise ConfigError(f"bad stripe for {part}: {(s_lo, s_hi)}")
        if not 0.0 < self.max_area <= 1.0:
            raise ConfigError("max_area must lie in (0, 1]")
        # stripes must jointly cover the whole height
        spans = sorted(self.stripes.values())
        reach = 0.0
        for lo, hi in spans:
            if lo > reach:
                raise ConfigError("fallback stripes leave a vertical gap")
            reach = max(reach, hi)
        if reach < 1.0:
            raise ConfigError("fallback stripes do not reach the image bottom")


@dataclass
class ModelConfig:
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    out_dim: int = 32
    rmp_heads: int = 2
    mask_init: float = 2.0
    threshold: float = 0.5
    prompt_len: int = 4
    prompt_dim: int = 64
    text_layers: int = 2
    text_heads: int = 4
    granularities: str = "GHUL"
    mask_source: str = "predicted"

    def validate(self) -> None:
        if self.embed_dim % self.num_heads or self.embed_dim % self.rmp_heads:
            raise ConfigError("embed_dim must be divisible by num_heads and rmp_heads")
        if self.prompt_dim % self.text_heads:
            raise ConfigError("prompt_dim must be divisible by text_heads")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        parse_granularities(self.granularities)
        if self.mask_source not in MASK_SOURCES:
            raise ConfigError(f"mask_source must be one of {MASK_SOURCES}")

    @property
    def active_granularities(self) -> tuple[str, ...]:
        return parse_granularities(self.granularities)

    @property
    def active_parts(self) -> tuple[str, ...]:
        return tuple(g for g in self.active_granularities if g != "global")


@dataclass
class TrainConfig:
    s1_epochs: int = 30
    s1_lr: float = 5e-3
    s1_min_lr: float = 1e-7
    s2_epochs: int = 20
    s2_lr: float = 1e-3
    rmp_lr_mult: float = 10.0
    weight_decay: float = 1e-4
    ids_per_batch: int = 8
    samples_per_id: int = 4
    warmup_frac: float = 0.1
    warmup_factor: float = 0.1
    decay_milestones: tuple[float, float] = (2 / 3, 5 / 6)
    decay_gamma: float = 0.1
    tau: float = 0.01
    momentum: float = 0.2
    label_smoothing: float = 0.1
    dice_eps: float = 1e-6
    flip: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.s1_epochs < 1 or self.s2_epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.samples_per_id < 2 or self.ids_per_batch < 1:
            raise ConfigError("batch needs ids_per_batch >= 1 and samples_per_id >= 2")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must lie in [0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")

    @classmethod
    def full_scale(cls, **overrides: Any) -> "TrainConfig":
        """Full-scale schedule (120 + 60 epochs, 16 IDs x 4 samples)."""
        values = dict(
            s1_epochs=120, s1_lr=3.5e-4, s2_epochs=60, s2_lr=5e-6,
            ids_per_batch=16, samples_per_id=4,
        )
        values.update(overrides)
        return cls(**values)


@dataclass
class RunConfig:
    data: GenConfig = field(default_factory=GenConfig)
    calib: CalibPolicy = field(default_factory=CalibPolicy)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = "runs/default"

    def validate(self) -> "RunConfig":
        self.data.validate()
        self.calib.validate()
        self.model.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        for section, values in payload.items():
            if section == "out":
                cfg.out = values
                continue
            apply_section(cfg, section, values)
        return cfg

    def write(self, path: str | Path) -> None:
        parser = configparser.ConfigParser()
        for section in ("data", "calib", "model", "train"):
            obj = getattr(self, section)
            parser[section] = {
                f.name: json.dumps(_plain(getattr(obj, f.name)))
                for f in dataclasses.fields(obj)
            }
        parser["run"] = {"out": json.dumps(self.out)}
        with open(path, "w", encoding="utf-8") as fh:
            parser.write(fh)


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def parse_granularities(spec: str) -> tuple[str, ...]:
    letters = spec.replace(",", "").replace("+", "").upper()
    if not letters or any(ch not in GRANULARITY_LETTERS for ch in letters):
        raise ConfigError(f"granularities must be a subset of G,H,U,L, got {spec!r}")
    if "G" not in letters:
        raise ConfigError("the global granularity G is always required")
    chosen = {GRANULARITY_LETTERS[ch] for ch in letters}
    return tuple(g for g in GRANULARITIES if g in chosen)


def _coerce(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_section(cfg: RunConfig, section: str, values: dict[str, Any]) -> None:
    if section == "run":
        if "out" in values:
            cfg.out = values["out"]
        return
    if section not in ("data", "calib", "model", "train"):
        raise ConfigError(f"unknown config section [{section}]")
    obj = getattr(cfg, section)
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}")
        current = getattr(obj, key)
        if isinstance(current, tuple):
            value = tuple(value)
        elif isinstance(current, dict):
            value = {k: tuple(v) for k, v in value.items()}
        elif isinstance(current, bool):
            value = bool(value)
        elif isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{section}.{key} must be an integer")
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        setattr(obj, key, value)


def load_config(path: str | Path | None = None, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    for section in parser.sections():
        apply_section(cfg, section, {k: _coerce(v) for k, v in parser[section].items()})
    return cfg
