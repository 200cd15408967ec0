"""Training configuration and its ``key = value`` / ``[section]`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .nn import ConfigError

VARIANTS = ("rgb", "thermal", "combined", "input_fusion", "feature_fusion", "style_aug",
            "mmc", "mmc_recon", "mmc_crossrecon")


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    extra_channels: tuple[int, ...] = (64, 64)
    anchor_sizes: tuple[float, ...] = (0.16, 0.32, 0.6)


@dataclass
class AugmentConfig:
    enabled: bool = True
    crop_prob: float = 0.5
    crop_min: float = 0.6
    photometric_prob: float = 0.5
    contrast: tuple[float, float] = (0.5, 1.5)
    saturation: tuple[float, float] = (0.5, 1.5)
    hue_degrees: float = 18.0
    thermal_contrast: bool = False


@dataclass
class TrainConfig:
    variant: str = "rgb"
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 0.05
    steps: int = 2000
    seed: int = 0
    log_every: int = 10
    fixed_batch: bool = False
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")


SECTIONS = {"train": None, "loss": "loss", "model": "model", "augment": "augment"}


def _coerce(value: str, current):
    value = value.strip()
    if isinstance(current, bool):
        if value.lower() in ("true", "1", "yes", "on"):
            return True
        if value.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(current, tuple):
        parts = [p for p in value.replace("(", "").replace(")", "").split(",") if p.strip()]
        kind = type(current[0]) if current else float
        return tuple(kind(p) for p in parts)
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def apply_setting(cfg: TrainConfig, section: str, key: str, value: str) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    attr = SECTIONS[section]
    target = cfg if attr is None else getattr(cfg, attr)
    names = {f.name for f in dataclasses.fields(target)} - {"loss", "model", "augment"}
    if key not in names:
        raise ConfigError(f"unknown config key {key!r} in [{section}]")
    try:
        setattr(target, key, _coerce(value, getattr(target, key)))
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {value!r}") from exc


def apply_override(cfg: TrainConfig, assignment: str) -> None:
    """``key=value`` or ``section.key=value`` from the command line."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    section, _, name = key.strip().rpartition(".")
    apply_setting(cfg, section or "train", name, value)


def validate(cfg: TrainConfig) -> TrainConfig:
    # re-run dataclass validation after field-by-field mutation
    cfg.__post_init__()
    cfg.loss.__post_init__()
    return cfg


def parse_config(text: str, cfg: TrainConfig | None = None) -> TrainConfig:
    cfg = cfg or TrainConfig()
    section = "train"
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        apply_setting(cfg, section, key.strip(), value)
    return validate(cfg)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: TrainConfig) -> str:
    lines = ["[train]"]
    for f in dataclasses.fields(cfg):
        if f.name not in ("loss", "model", "augment"):
            lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    for section, attr in SECTIONS.items():
        if attr is None:
            continue
        lines.append(f"\n[{section}]")
        sub = getattr(cfg, attr)
        lines.extend(f"{f.name} = {_format(getattr(sub, f.name))}" for f in dataclasses.fields(sub))
    return "\n".join(lines) + "\n"
