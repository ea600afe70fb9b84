"""Image-side conditioning: multi-scale encoders, FPN fusion, and the
IML / CIML condition assembly.

Both task modes run through the same parameters. CIML simply pushes a
second image (the pristine original) through the identical encoder+FPN,
so switching modes never adds or removes a weight.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "TaskMode",
    "GuidanceCondition",
    "TinyEncoder",
    "SwinEncoder",
    "FPN",
    "ConditionEncoder",
]

STRIDES = (4, 8, 16, 32)


class TaskMode(str, Enum):
    IML = "iml"    # forged image only
    CIML = "ciml"  # forged + original pair

    @property
    def num_conditions(self) -> int:
        return 2 if self is TaskMode.CIML else 1


@dataclass
class GuidanceCondition:
    """Fused image features at latent resolution, one per input image."""

    features: torch.Tensor  # (B, C, h, w)
    source_role: str        # "forged" | "original"


def _norm(channels: int) -> nn.GroupNorm:
    groups = next(g for g in (8, 4, 2, 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


class _ConvStage(nn.Module):
    """Downsample by 2 then refine; one pyramid level of the tiny encoder."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.down = nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride=2, padding=1), _norm(cout), nn.SiLU()
        )
        self.refine = nn.Sequential(
            nn.Conv2d(cout, cout, 3, padding=1), _norm(cout), nn.SiLU()
        )

    def forward(self, x):
        x = self.down(x)
        return x + self.refine(x)


class TinyEncoder(nn.Module):
    """Small convolutional backbone emitting strides 4/8/16/32."""

    def __init__(self, channels: tuple[int, int, int, int] = (32, 64, 96, 128)):
        super().__init__()
        self.channels = tuple(channels)
        self.stem = nn.Sequential(
            nn.Conv2d(3, channels[0], 3, stride=2, padding=1),
            _norm(channels[0]),
            nn.SiLU(),
            nn.Conv2d(channels[0], channels[0], 3, padding=1),
            _norm(channels[0]),
            nn.SiLU(),
        )
        ins = (channels[0],) + self.channels[:-1]
        self.stages = nn.ModuleList(_ConvStage(i, o) for i, o in zip(ins, channels))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        _check_image(x)
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def _check_image(x: torch.Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) image tensor, got {tuple(x.shape)}")
    if x.shape[-2] % 32 or x.shape[-1] % 32:
        raise ValueError(f"image size {tuple(x.shape[-2:])} must be divisible by 32")


class _WindowAttention(nn.Module):
    """Multi-head self-attention inside square windows with relative bias."""

    def __init__(self, dim: int, window: int, heads: int):
        super().__init__()
        self.dim = dim
        self.window = window
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros(heads, (2 * window - 1) ** 2))
        self._index_cache: dict[int, torch.Tensor] = {}

    def _rel_index(self, win: int, device) -> torch.Tensor:
        # Relative-position index for an effective window <= the configured
        # one; offsets share the full-size bias table.
        cached = self._index_cache.get(win)
        if cached is None or cached.device != device:
            coords = torch.stack(
                torch.meshgrid(
                    torch.arange(win, device=device),
                    torch.arange(win, device=device),
                    indexing="ij",
                )
            ).flatten(1)
            rel = coords[:, :, None] - coords[:, None, :] + self.window - 1
            cached = rel[0] * (2 * self.window - 1) + rel[1]
            self._index_cache[win] = cached
        return cached

    def forward(
        self, x: torch.Tensor, win: int, attn_mask: torch.Tensor | None
    ) -> torch.Tensor:
        # x: (num_windows*B, win*win, dim)
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        index = self._rel_index(win, x.device)
        attn = attn + self.rel_bias[:, index.reshape(-1)].reshape(self.heads, n, n)
        if attn_mask is not None:
            nw = attn_mask.shape[0]
            attn = attn.view(b // nw, nw, self.heads, n, n) + attn_mask[:, None]
            attn = attn.view(b, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class _SwinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, shifted: bool):
        super().__init__()
        self.window = window
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _WindowAttention(dim, window, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim)
        )

    @staticmethod
    def _partition(x: torch.Tensor, win: int) -> torch.Tensor:
        b, h, w, c = x.shape
        x = x.view(b, h // win, win, w // win, win, c)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, win * win, c)

    @staticmethod
    def _merge(wins: torch.Tensor, win: int, b: int, h: int, w: int) -> torch.Tensor:
        x = wins.view(b, h // win, w // win, win, win, -1)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)

    @staticmethod
    def _shift_mask(h: int, w: int, win: int, shift: int, device) -> torch.Tensor:
        # Marks which pre-roll region each position came from, so windows
        # that wrap around the border cannot attend across the seam.
        img = torch.zeros(1, h, w, 1, device=device)
        cnt = itertools.count()
        for hs in (slice(0, -win), slice(-win, -shift), slice(-shift, None)):
            for ws in (slice(0, -win), slice(-win, -shift), slice(-shift, None)):
                img[:, hs, ws, :] = next(cnt)
        groups = _SwinBlock._partition(img, win).squeeze(-1)
        mask = groups[:, None, :] - groups[:, :, None]
        return mask.masked_fill(mask != 0, float(-100.0))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, H, W, C)
        b, h, w, _ = x.shape
        win = min(self.window, h, w)
        if h % win or w % win:
            raise ValueError(f"feature size {(h, w)} not divisible by window {win}")
        shift = win // 2 if (self.shifted and win > 1) else 0

        shortcut = x
        x = self.norm1(x)
        if shift:
            x = torch.roll(x, (-shift, -shift), dims=(1, 2))
            mask = self._shift_mask(h, w, win, shift, x.device)
        else:
            mask = None
        wins = self._partition(x, win)
        wins = self.attn(wins, win, mask)
        x = self._merge(wins, win, b, h, w)
        if shift:
            x = torch.roll(x, (shift, shift), dims=(1, 2))
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class _PatchMerging(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        x = x.view(b, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, h // 2, w // 2, 4 * c)
        return self.reduce(self.norm(x))


class SwinEncoder(nn.Module):
    """Shifted-window transformer backbone (full-scale profile).

    Defaults match a Swin-B-class layout; width and depth stay
    configurable so contract tests can run a reduced instance.
    """

    def __init__(
        self,
        embed_dim: int = 128,
        depths: tuple[int, ...] = (2, 2, 18, 2),
        heads: tuple[int, ...] = (4, 8, 16, 32),
        window: int = 8,
    ):
        super().__init__()
        if len(depths) != 4 or len(heads) != 4:
            raise ValueError("need exactly 4 stages for the stride 4/8/16/32 pyramid")
        self.channels = tuple(embed_dim * 2**i for i in range(4))
        self.patch_embed = nn.Conv2d(3, embed_dim, kernel_size=4, stride=4)
        self.embed_norm = nn.LayerNorm(embed_dim)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i, (depth, h) in enumerate(zip(depths, heads)):
            dim = self.channels[i]
            self.stages.append(
                nn.ModuleList(
                    _SwinBlock(dim, h, window, shifted=(j % 2 == 1))
                    for j in range(depth)
                )
            )
            if i < 3:
                self.merges.append(_PatchMerging(dim))
        self.out_norms = nn.ModuleList(nn.LayerNorm(c) for c in self.channels)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        _check_image(x)
        x = self.patch_embed(x).permute(0, 2, 3, 1)
        x = self.embed_norm(x)
        feats = []
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                x = block(x)
            feats.append(self.out_norms[i](x).permute(0, 3, 1, 2))
            if i < 3:
                x = self.merges[i](x)
        return feats


class FPN(nn.Module):
    """Top-down lateral fusion; returns the stride-4 map at a fixed width."""

    def __init__(self, in_channels: tuple[int, int, int, int], out_channels: int = 64):
        super().__init__()
        self.out_channels = out_channels
        self.laterals = nn.ModuleList(
            nn.Conv2d(c, out_channels, 1) for c in in_channels
        )
        self.out_conv = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, pyramid: list[torch.Tensor]) -> torch.Tensor:
        if len(pyramid) != len(self.laterals):
            raise ValueError(f"expected {len(self.laterals)} levels, got {len(pyramid)}")
        feats = [lat(p) for lat, p in zip(self.laterals, pyramid)]
        for i in range(len(feats) - 1, 0, -1):
            feats[i - 1] = feats[i - 1] + F.interpolate(
                feats[i], size=feats[i - 1].shape[-2:], mode="nearest"
            )
        return self.out_conv(feats[0])


class ConditionEncoder(nn.Module):
    """Encoder + FPN producing guidance conditions, shared across modes."""

    def __init__(self, encoder: nn.Module, fpn: FPN):
        super().__init__()
        self.encoder = encoder
        self.fpn = fpn

    @property
    def out_channels(self) -> int:
        return self.fpn.out_channels

    def encode_image(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Multi-scale pyramid at strides 4/8/16/32."""
        return self.encoder(image)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.fpn(self.encode_image(image))

    def build_condition(
        self,
        mode: TaskMode,
        forged: torch.Tensor,
        original: torch.Tensor | None = None,
    ) -> tuple[GuidanceCondition, ...]:
        """One condition for IML, two (forged, original) for CIML.

        The original runs through the very same weights; supplying it in
        IML mode (or omitting it in CIML mode) is an error.
        """
        mode = TaskMode(mode)
        if mode is TaskMode.IML and original is not None:
            raise ValueError("IML takes only a forged image; original was supplied")
        if mode is TaskMode.CIML and original is None:
            raise ValueError("CIML requires the original image")
        conds = [GuidanceCondition(self(forged), "forged")]
        if mode is TaskMode.CIML:
            conds.append(GuidanceCondition(self(original), "original"))
        return tuple(conds)
