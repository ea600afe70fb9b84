"""Experiment configuration: one YAML file fully determines a run.

Unknown keys are rejected with their path so typos fail loudly; the
canonical-JSON hash of a config is embedded in checkpoints and reports
to tie artifacts back to the exact settings that produced them.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

__all__ = [
    "ScheduleConfig",
    "ModelConfig",
    "LossSettings",
    "TrainSettings",
    "DataSettings",
    "SamplerSettings",
    "ExperimentConfig",
    "ConfigError",
    "load_config",
    "config_hash",
]

CONFIG_DIR_ENV = "TAMPERDIFF_CONFIG_DIR"


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_mode: str = "beta"


@dataclass
class ModelConfig:
    profile: str = "tiny"          # tiny | full
    image_size: int = 64
    embed_dim: int = 16
    latent_stride: int = 4
    # None -> profile default
    fpn_channels: int | None = None
    fusion_width: int | None = None
    decoder_dim: int | None = None
    decoder_layers: int | None = None
    decoder_heads: int | None = None
    time_dim: int | None = None
    encoder_channels: list[int] | None = None   # tiny profile
    swin_embed_dim: int | None = None           # full profile
    swin_depths: list[int] | None = None
    swin_heads: list[int] | None = None
    swin_window: int | None = None


@dataclass
class LossSettings:
    mu: float = 0.5
    eta: float = 2.5
    lambda_: float = 0.3
    smooth: float = 1.0


@dataclass
class TrainSettings:
    mode: str = "iml"              # iml | ciml | mixed
    batch_size: int = 12
    learning_rate: float = 6e-5
    weight_decay: float = 1e-2
    epochs: int = 50
    grad_clip: float = 1.0
    checkpoint_every: int = 10     # epochs
    log_every: int = 10            # steps


@dataclass
class DataSettings:
    manifest: str | None = None
    size: int = 64
    jpeg_aug: bool = False
    jpeg_quality_min: int = 30
    jpeg_quality_max: int = 100
    aug_original: bool = True      # JPEG-compress the original too (CIML)
    image_mean: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    image_std: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])


@dataclass
class SamplerSettings:
    steps: int = 1
    seed: int = 0
    threshold: float = 0.5
    zero_noise: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossSettings = field(default_factory=LossSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataSettings = field(default_factory=DataSettings)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


_SECTIONS = {
    "schedule": ScheduleConfig,
    "model": ModelConfig,
    "loss": LossSettings,
    "train": TrainSettings,
    "data": DataSettings,
    "sampler": SamplerSettings,
}


def _build_section(cls, data: Any, path: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}; known keys: {sorted(known)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    sections = {
        name: _build_section(cls, data.get(name), name)
        for name, cls in _SECTIONS.items()
    }
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed: expected an integer, got {seed!r}")
    cfg = ExperimentConfig(seed=seed, **sections)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.schedule.T < 1:
        raise ConfigError("schedule.T must be >= 1")
    if not 0 < cfg.schedule.beta_start <= cfg.schedule.beta_end < 1:
        raise ConfigError("schedule: need 0 < beta_start <= beta_end < 1")
    if cfg.model.profile not in ("tiny", "full"):
        raise ConfigError(f"model.profile must be tiny or full, got {cfg.model.profile!r}")
    if cfg.train.mode not in ("iml", "ciml", "mixed"):
        raise ConfigError(f"train.mode must be iml, ciml or mixed, got {cfg.train.mode!r}")
    if cfg.model.image_size % 32:
        raise ConfigError("model.image_size must be divisible by 32")
    if cfg.model.image_size != cfg.data.size:
        raise ConfigError(
            f"model.image_size ({cfg.model.image_size}) and data.size "
            f"({cfg.data.size}) must agree"
        )
    if cfg.sampler.steps < 1 or cfg.sampler.steps > cfg.schedule.T:
        raise ConfigError("sampler.steps must be in [1, schedule.T]")
    if not 0 < cfg.sampler.threshold < 1:
        raise ConfigError("sampler.threshold must be in (0, 1)")
    if cfg.train.batch_size < 1 or cfg.train.epochs < 0:
        raise ConfigError("train.batch_size must be >= 1 and epochs >= 0")
    if not 30 <= cfg.data.jpeg_quality_min <= cfg.data.jpeg_quality_max <= 100:
        raise ConfigError("data: need 30 <= jpeg_quality_min <= jpeg_quality_max <= 100")


def resolve_config_path(path: str | Path) -> Path:
    """Resolve a config path, falling back to $TAMPERDIFF_CONFIG_DIR."""
    p = Path(path)
    if p.exists():
        return p
    env_dir = os.environ.get(CONFIG_DIR_ENV)
    if env_dir and not p.is_absolute():
        candidate = Path(env_dir) / p
        if candidate.exists():
            return candidate
    raise ConfigError(f"config file not found: {path}")


def load_config(path: str | Path) -> ExperimentConfig:
    resolved = resolve_config_path(path)
    with open(resolved) as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data or {})


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def config_hash(data: dict) -> str:
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
