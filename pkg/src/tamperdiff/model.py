"""Model assembly and checkpoint I/O.

A localizer bundles the three trainable pieces: the condition encoder
(image backbone + FPN), the mask codec's class-embedding table, and the
denoiser. Task mode is a forward-time argument, never an architectural
one, so a single parameter set serves both IML and CIML.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import torch
from torch import nn

from .conditioner import (
    FPN,
    ConditionEncoder,
    GuidanceCondition,
    SwinEncoder,
    TaskMode,
    TinyEncoder,
)
from .config import ExperimentConfig, ModelConfig, config_from_dict
from .denoiser import DeformableDecoder, Denoiser, TinyDecoder
from .maskcodec import MaskCodec
from .schedule import make_schedule

__all__ = ["Localizer", "build_model", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_VERSION = 1

_TINY = dict(
    fpn_channels=64,
    fusion_width=64,
    decoder_dim=128,
    decoder_layers=2,
    decoder_heads=4,
    time_dim=128,
    encoder_channels=(32, 64, 96, 128),
)
_FULL = dict(
    fpn_channels=256,
    fusion_width=256,
    decoder_dim=256,
    decoder_layers=6,
    decoder_heads=8,
    time_dim=256,
    swin_embed_dim=128,
    swin_depths=(2, 2, 18, 2),
    swin_heads=(4, 8, 16, 32),
    swin_window=8,
)


def _resolved(cfg: ModelConfig) -> dict[str, Any]:
    defaults = dict(_TINY if cfg.profile == "tiny" else _FULL)
    for key in list(defaults):
        value = getattr(cfg, key, None)
        if value is not None:
            defaults[key] = tuple(value) if isinstance(value, list) else value
    return defaults


class Localizer(nn.Module):
    """Conditional-diffusion manipulation localizer."""

    def __init__(
        self,
        cond_encoder: ConditionEncoder,
        codec: MaskCodec,
        denoiser: Denoiser,
        image_size: int,
    ):
        super().__init__()
        self.cond_encoder = cond_encoder
        self.codec = codec
        self.denoiser = denoiser
        self.image_size = image_size

    @property
    def latent_size(self) -> int:
        return self.image_size // self.codec.latent_stride

    def conditions(
        self,
        mode: TaskMode | str,
        forged: torch.Tensor,
        original: torch.Tensor | None = None,
    ) -> tuple[GuidanceCondition, ...]:
        return self.cond_encoder.build_condition(TaskMode(mode), forged, original)

    def denoise(
        self,
        x_t: torch.Tensor,
        conditions: tuple[GuidanceCondition, ...],
        t: torch.Tensor,
    ) -> torch.Tensor:
        return self.denoiser(x_t, conditions, t)


def build_model(cfg: ExperimentConfig) -> Localizer:
    m = cfg.model
    r = _resolved(m)
    if m.profile == "tiny":
        encoder = TinyEncoder(r["encoder_channels"])
        channels = encoder.channels
    else:
        encoder = SwinEncoder(
            embed_dim=r["swin_embed_dim"],
            depths=r["swin_depths"],
            heads=r["swin_heads"],
            window=r["swin_window"],
        )
        channels = encoder.channels
    fpn = FPN(channels, r["fpn_channels"])
    cond_encoder = ConditionEncoder(encoder, fpn)
    codec = MaskCodec(embed_dim=m.embed_dim, latent_stride=m.latent_stride)
    decoder_in = 2 * r["fusion_width"]
    if m.profile == "tiny":
        decoder = TinyDecoder(
            decoder_in, r["decoder_dim"], r["time_dim"], r["decoder_layers"]
        )
    else:
        decoder = DeformableDecoder(
            decoder_in,
            r["decoder_dim"],
            r["time_dim"],
            r["decoder_layers"],
            r["decoder_heads"],
        )
    sched = make_schedule(
        cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end,
        cfg.schedule.sigma_mode,
    )
    denoiser = Denoiser(
        embed_dim=m.embed_dim,
        cond_channels=r["fpn_channels"],
        fusion_width=r["fusion_width"],
        decoder=decoder,
        t_dim=r["time_dim"],
        t_max=cfg.schedule.T,
        alpha_bars=sched.alpha_bars,
    )
    return Localizer(cond_encoder, codec, denoiser, image_size=m.image_size)


def save_checkpoint(
    path: str | Path,
    model: Localizer,
    cfg: ExperimentConfig,
    extra: dict | None = None,
) -> None:
    """Single-archive checkpoint: all weights + config + config hash."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[Localizer, ExperimentConfig, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"incompatible checkpoint version {version!r} (expected {CHECKPOINT_VERSION})"
        )
    cfg = config_from_dict(payload["config"])
    if cfg.hash != payload.get("config_hash"):
        raise ValueError("checkpoint config hash mismatch; file is corrupt or edited")
    model = build_model(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg, payload.get("extra", {})
