"""Training configuration and its INI-style file form."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from io import StringIO
from pathlib import Path

from .errors import ConfigError

ABLATIONS = ("no_unsup_prior", "no_unsup_seg", "no_image_adapter", "no_mask_adapter", "supervised_only")


@dataclass
class Ablations:
    no_unsup_prior: bool = False
    no_unsup_seg: bool = False
    no_image_adapter: bool = False
    no_mask_adapter: bool = False
    supervised_only: bool = False

    def __post_init__(self):
        if self.supervised_only:
            self.no_unsup_prior = True
            self.no_unsup_seg = True

    @classmethod
    def from_names(cls, names) -> "Ablations":
        names = [n for n in (names or []) if n]
        unknown = set(names) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation flags {sorted(unknown)}; choose from {ABLATIONS}")
        return cls(**{n: True for n in names})

    def names(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]


@dataclass
class TrainConfig:
    image_size: int = 64
    K: int = 2
    labeled_ratio: float = 0.1
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    stage1_epochs: int = 20
    stage2_epochs: int = 50
    beta: float = 0.1
    # weight of the unlabeled prior term in stage 1, where the warm-up clock is not running
    stage1_lambda: float = 0.1
    lr: float = 1e-3
    smooth: float = 1.0
    seed: int = 0
    stop_gradient_consistency: bool = True
    sample_latents: bool = False
    deterministic: bool = True
    val_every: int = 1
    # model geometry
    downsample: int = 8
    latent_channels: int = 4
    encoder_channels: tuple = (24, 48, 64)
    mapper_width: int = 128
    mapper_depth: int = 2
    mapper_heads: int = 4
    ablate: Ablations = field(default_factory=Ablations)

    def __post_init__(self):
        if isinstance(self.ablate, dict):
            self.ablate = Ablations(**self.ablate)
        elif isinstance(self.ablate, (list, tuple)):
            self.ablate = Ablations.from_names(self.ablate)
        self.encoder_channels = tuple(self.encoder_channels)
        self.validate()

    def validate(self) -> None:
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.stage1_lambda < 0:
            raise ConfigError("stage1_lambda must be >= 0")
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ConfigError("stage epochs must be >= 1")
        if self.image_size % self.downsample:
            raise ConfigError(f"image_size {self.image_size} not divisible by downsample {self.downsample}")
        if self.batch_labeled < 1 or self.batch_unlabeled < 0:
            raise ConfigError("bad batch composition")
        if not 0 < self.labeled_ratio <= 1:
            raise ConfigError("labeled_ratio must be in (0, 1]")
        if self.K < 2:
            raise ConfigError("K must be >= 2")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_SECTIONS = {
    "data": ("image_size", "K", "labeled_ratio", "seed"),
    "model": ("downsample", "latent_channels", "encoder_channels", "mapper_width", "mapper_depth", "mapper_heads"),
    "train": ("batch_labeled", "batch_unlabeled", "stage1_epochs", "stage2_epochs", "beta", "stage1_lambda", "lr", "smooth",
              "stop_gradient_consistency", "sample_latents", "deterministic", "val_every"),
}


def _coerce(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def load_config_text(text: str) -> TrainConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep K upper-case
    parser.read_string(text)
    defaults = TrainConfig()
    values = {}
    for section, keys in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(f"unknown key [{section}] {key}")
            values[key] = _coerce(key, raw, getattr(defaults, key))
    if parser.has_section("ablate"):
        flags = {k: _coerce(k, v, False) for k, v in parser.items("ablate")}
        unknown = set(flags) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation flags {sorted(unknown)}")
        values["ablate"] = Ablations(**flags)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return load_config_text(Path(path).read_text())


def dump_config(cfg: TrainConfig) -> str:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, keys in _SECTIONS.items():
        parser[section] = {}
        for key in keys:
            val = getattr(cfg, key)
            parser[section][key] = " ".join(map(str, val)) if isinstance(val, tuple) else str(val)
    parser["ablate"] = {f.name: str(getattr(cfg.ablate, f.name)) for f in fields(cfg.ablate)}
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
