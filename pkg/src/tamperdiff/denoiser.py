"""The denoising network: fuses noisy mask embeddings with guidance
conditions and predicts clean-mask logits directly.

Two interchangeable decoder profiles honor the same contract
(fused map + timestep -> per-cell class logits): a two-layer
convolutional-attention decoder for desk scale and a six-layer
deformable-attention decoder for full scale. Either way the fused input
is always two slots wide, so the parameter set never depends on the
task mode: IML leaves the second slot zero-filled, CIML fills it from
the original image through the same fusion convolution.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .conditioner import GuidanceCondition

__all__ = [
    "timestep_encoding",
    "TimestepEmbedding",
    "TinyDecoder",
    "DeformableDecoder",
    "Denoiser",
]


def timestep_encoding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal encoding of integer timesteps, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    enc = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        enc = F.pad(enc, (0, 1))
    return enc


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(timestep_encoding(t, self.dim))


class _ResBlock(nn.Module):
    """3x3 conv residual block with timestep scale-shift modulation."""

    def __init__(self, dim: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, dim)
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, dim)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, 2 * dim)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.t_proj(temb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        return x + self.conv2(F.silu(h))


def _position_encoding_2d(h: int, w: int, dim: int, device) -> torch.Tensor:
    """Fixed 2D sinusoidal position map, (dim, h, w)."""
    half = dim // 2
    ys = timestep_encoding(torch.arange(h, device=device), half)
    xs = timestep_encoding(torch.arange(w, device=device), dim - half)
    grid = torch.cat(
        [ys[:, None, :].expand(h, w, half), xs[None, :, :].expand(h, w, dim - half)],
        dim=-1,
    )
    return grid.permute(2, 0, 1)


class _SelfAttention2d(nn.Module):
    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, dim)
        self.qkv = nn.Conv2d(dim, dim * 3, 1)
        self.proj = nn.Conv2d(dim, dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        y = self.norm(x) + _position_encoding_2d(h, w, c, x.device)
        q, k, v = self.qkv(y).reshape(b, 3, self.heads, c // self.heads, h * w).unbind(1)
        attn = torch.softmax(q.transpose(-2, -1) @ k / math.sqrt(c // self.heads), dim=-1)
        out = (v @ attn.transpose(-2, -1)).reshape(b, c, h, w)
        return x + self.proj(out)


class TinyDecoder(nn.Module):
    """Two conv-attention layers; the desk-scale decoder profile."""

    def __init__(self, in_channels: int, dim: int = 128, t_dim: int = 128, layers: int = 2):
        super().__init__()
        self.in_proj = nn.Conv2d(in_channels, dim, 1)
        self.blocks = nn.ModuleList()
        for _ in range(layers):
            self.blocks.append(nn.ModuleList([_ResBlock(dim, t_dim), _SelfAttention2d(dim)]))
        self.head = nn.Sequential(
            nn.GroupNorm(8, dim), nn.SiLU(), nn.Conv2d(dim, 2, 1)
        )

    def forward(self, fused: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        x = self.in_proj(fused)
        for res, attn in self.blocks:
            x = attn(res(x, temb))
        return self.head(x)


class _DeformableAttention(nn.Module):
    """Single-level deformable attention: each cell attends to K sampled
    points per head at learned offsets from its own location."""

    def __init__(self, dim: int, heads: int = 8, points: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.points = points
        self.value_proj = nn.Conv2d(dim, dim, 1)
        self.offset = nn.Linear(dim, heads * points * 2)
        self.weight = nn.Linear(dim, heads * points)
        self.out_proj = nn.Linear(dim, dim)
        self._reset()

    def _reset(self) -> None:
        # Zero offsets would collapse all samples onto the reference point;
        # seed each head with a small ring of directions instead.
        nn.init.zeros_(self.offset.weight)
        angles = torch.arange(self.heads) * (2.0 * math.pi / self.heads)
        ring = torch.stack([angles.cos(), angles.sin()], dim=-1)
        bias = ring[:, None, :] * (torch.arange(self.points) + 1.0)[None, :, None]
        with torch.no_grad():
            self.offset.bias.copy_(bias.reshape(-1))
        nn.init.zeros_(self.weight.weight)
        nn.init.zeros_(self.weight.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        hd = c // self.heads
        value = self.value_proj(x).reshape(b * self.heads, hd, h, w)

        q = x.flatten(2).transpose(1, 2)  # (B, hw, C)
        offsets = self.offset(q).reshape(b, h * w, self.heads, self.points, 2)
        weights = self.weight(q).reshape(b, h * w, self.heads, self.points)
        weights = torch.softmax(weights, dim=-1)

        ys, xs = torch.meshgrid(
            torch.arange(h, device=x.device, dtype=torch.float32),
            torch.arange(w, device=x.device, dtype=torch.float32),
            indexing="ij",
        )
        ref = torch.stack([xs, ys], dim=-1).reshape(1, h * w, 1, 1, 2)
        loc = ref + offsets  # offsets are in cell units
        size = torch.tensor([w, h], device=x.device, dtype=torch.float32)
        grid = (2.0 * loc + 1.0) / size - 1.0

        grid = grid.permute(0, 2, 1, 3, 4).reshape(b * self.heads, h * w, self.points, 2)
        sampled = F.grid_sample(
            value, grid, mode="bilinear", padding_mode="zeros", align_corners=False
        )  # (B*heads, hd, hw, K)
        weights = weights.permute(0, 2, 1, 3).reshape(b * self.heads, 1, h * w, self.points)
        out = (sampled * weights).sum(-1)  # (B*heads, hd, hw)
        out = out.reshape(b, c, h * w).transpose(1, 2)
        return self.out_proj(out).transpose(1, 2).reshape(b, c, h, w)


class _DeformableLayer(nn.Module):
    def __init__(self, dim: int, t_dim: int, heads: int, points: int, ffn_mult: int = 4):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, dim)
        self.attn = _DeformableAttention(dim, heads, points)
        self.norm2 = nn.GroupNorm(8, dim)
        self.ffn = nn.Sequential(
            nn.Conv2d(dim, dim * ffn_mult, 1), nn.GELU(), nn.Conv2d(dim * ffn_mult, dim, 1)
        )
        self.t_proj = nn.Linear(t_dim, 4 * dim)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        s1, b1, s2, b2 = self.t_proj(temb)[:, :, None, None].chunk(4, dim=1)
        x = x + self.attn(self.norm1(x) * (1.0 + s1) + b1)
        return x + self.ffn(self.norm2(x) * (1.0 + s2) + b2)


class DeformableDecoder(nn.Module):
    """Six deformable-attention layers; the full-scale decoder profile."""

    def __init__(
        self,
        in_channels: int,
        dim: int = 256,
        t_dim: int = 128,
        layers: int = 6,
        heads: int = 8,
        points: int = 4,
    ):
        super().__init__()
        self.in_proj = nn.Conv2d(in_channels, dim, 1)
        self.layers = nn.ModuleList(
            _DeformableLayer(dim, t_dim, heads, points) for _ in range(layers)
        )
        self.head = nn.Sequential(nn.GroupNorm(8, dim), nn.SiLU(), nn.Conv2d(dim, 2, 1))

    def forward(self, fused: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        x = self.in_proj(fused)
        for layer in self.layers:
            x = layer(x, temb)
        return self.head(x)


class Denoiser(nn.Module):
    """Fusion + timestep conditioning + decoder.

    ``forward`` takes the noisy embedding (B, D, h, w), one or two
    guidance conditions on the same grid, and integer timesteps (B,).

    The noisy input is pre-scaled by its renormalized signal share
    sqrt((ab_t - ab_T) / (1 - ab_T)) before fusion (``input_gate``): the
    state's mask content scales with sqrt(ab_t) while its noise floor
    does not, so gating by signal share matches the optimum of ignoring
    a (numerically) pure-noise state and keeps high-t training steps
    from drowning the conditions in input noise. The gate is exactly 0
    at t = T, where the state carries no mask information at all.
    """

    def __init__(
        self,
        embed_dim: int,
        cond_channels: int,
        fusion_width: int,
        decoder: nn.Module,
        t_dim: int = 128,
        t_max: int | None = None,
        alpha_bars: torch.Tensor | None = None,
    ):
        super().__init__()
        self.fusion = nn.Conv2d(embed_dim + cond_channels, fusion_width, 3, padding=1)
        self.time_embed = TimestepEmbedding(t_dim)
        self.decoder = decoder
        self.t_max = t_max
        if alpha_bars is not None:
            ab = torch.as_tensor(alpha_bars, dtype=torch.float64)
            if t_max is not None and ab.numel() != t_max:
                raise ValueError("alpha_bars length must equal t_max")
            gate = torch.sqrt((ab - ab[-1]).clamp_min(0.0) / (1.0 - ab[-1]))
            gate = gate.to(torch.float32)
        else:
            gate = None
        self.register_buffer("input_gate", gate)

    def fuse_inputs(
        self, x_t: torch.Tensor, conditions: tuple[GuidanceCondition, ...]
    ) -> torch.Tensor:
        """Always emits 2F channels: slot A from the forged branch, slot B
        zero-filled (IML) or from the original branch (CIML)."""
        if not 1 <= len(conditions) <= 2:
            raise ValueError(f"expected 1 or 2 conditions, got {len(conditions)}")
        for cond in conditions:
            if cond.features.shape[-2:] != x_t.shape[-2:]:
                raise ValueError(
                    f"condition grid {tuple(cond.features.shape[-2:])} does not match "
                    f"noisy state grid {tuple(x_t.shape[-2:])}"
                )
        slot_a = self.fusion(torch.cat([x_t, conditions[0].features], dim=1))
        if len(conditions) == 2:
            slot_b = self.fusion(torch.cat([x_t, conditions[1].features], dim=1))
        else:
            slot_b = torch.zeros_like(slot_a)
        return torch.cat([slot_a, slot_b], dim=1)

    def forward(
        self,
        x_t: torch.Tensor,
        conditions: tuple[GuidanceCondition, ...],
        t: torch.Tensor,
    ) -> torch.Tensor:
        if t.dim() == 0:
            t = t.expand(x_t.shape[0])
        upper = self.t_max if self.t_max is not None else None
        if bool((t < 1).any()) or (upper is not None and bool((t > upper).any())):
            raise ValueError(f"timesteps out of range [1, {upper}]: {t.tolist()}")
        if self.input_gate is not None:
            x_t = x_t * self.input_gate[t - 1].view(-1, 1, 1, 1)
        fused = self.fuse_inputs(x_t, conditions)
        return self.decoder(fused, self.time_embed(t))
