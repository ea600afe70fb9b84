"""Bridge between discrete masks and the continuous diffusion space.

A binary mask (0 = authentic, 1 = manipulated) is downsampled to the
latent grid, each cell is replaced by a learnable class-embedding row,
and the result is rescaled so every channel lies in [-1, 1] -- the range
the noise schedule assumes. Decoder logits travel the other way: softmax,
bilinear upsample, threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = ["MaskEmbedding", "MaskCodec", "normalize_embedding", "table_range"]

# Guards degenerate channels where the two rows coincide.
_SPAN_EPS = 1e-12


@dataclass
class MaskEmbedding:
    """Continuous mask representation at latent resolution.

    ``values`` is (D, h, w) (or batched (B, D, h, w)); ``norm_lo`` and
    ``norm_hi`` record the per-channel affine range that was mapped onto
    [-1, 1].
    """

    values: torch.Tensor
    norm_lo: torch.Tensor
    norm_hi: torch.Tensor


def table_range(table: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel (min, max) over the class rows of a (2, D) table."""
    lo = table.min(dim=0).values
    hi = table.max(dim=0).values
    return lo, hi


def normalize_embedding(values: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Affine-rescale channel-first values so the table range maps to [-1, 1].

    ``values`` has channels on dim -3 ((..., D, h, w)); the lo/hi of each
    channel comes from ``table``. Applying this to values built from an
    already-normalized table is a no-op.
    """
    lo, hi = table_range(table)
    span = (hi - lo).clamp_min(_SPAN_EPS)
    lo = lo.view(-1, 1, 1)
    span = span.view(-1, 1, 1)
    return 2.0 * (values - lo) / span - 1.0


class MaskCodec(nn.Module):
    """Learnable two-row class-embedding table plus both codec directions."""

    def __init__(self, embed_dim: int = 16, latent_stride: int = 4):
        super().__init__()
        if embed_dim < 1 or latent_stride < 1:
            raise ValueError("embed_dim and latent_stride must be positive")
        self.embed_dim = embed_dim
        self.latent_stride = latent_stride
        self.table = nn.Parameter(torch.randn(2, embed_dim))

    def normalized_table(self) -> torch.Tensor:
        lo, hi = table_range(self.table)
        span = (hi - lo).clamp_min(_SPAN_EPS)
        return 2.0 * (self.table - lo) / span - 1.0

    @staticmethod
    def _as_mask_tensor(mask) -> torch.Tensor:
        if isinstance(mask, np.ndarray):
            mask = torch.from_numpy(np.ascontiguousarray(mask))
        mask = mask.long()
        bad = (mask != 0) & (mask != 1)
        if bool(bad.any()):
            raise ValueError("mask values must be exactly 0 or 1")
        return mask

    def downsample_mask(self, mask) -> torch.Tensor:
        """Majority-vote pooling to the latent grid; 50/50 ties go to class 1."""
        mask = self._as_mask_tensor(mask)
        squeeze = mask.dim() == 2
        if squeeze:
            mask = mask.unsqueeze(0)
        h, w = mask.shape[-2:]
        s = self.latent_stride
        if h % s or w % s:
            raise ValueError(f"mask size {(h, w)} not divisible by stride {s}")
        frac = F.avg_pool2d(mask.unsqueeze(1).float(), kernel_size=s, stride=s)
        down = (frac >= 0.5).long().squeeze(1)
        return down.squeeze(0) if squeeze else down

    def embed_mask(self, mask) -> MaskEmbedding:
        """Class-embed a binary mask and normalize it to [-1, 1].

        Accepts (H, W) or (B, H, W); returns channel-first values at
        1/latent_stride resolution. Differentiable w.r.t. the table.
        """
        down = self.downsample_mask(mask).to(self.table.device)
        ntable = self.normalized_table()
        values = ntable[down.reshape(-1)].reshape(*down.shape, self.embed_dim)
        values = values.movedim(-1, -3)
        lo, hi = table_range(self.table)
        return MaskEmbedding(values=values, norm_lo=lo.detach(), norm_hi=hi.detach())

    def logits_to_probs(self, logits: torch.Tensor) -> torch.Tensor:
        """Per-pixel P(manipulated) from 2-class logits (class dim = -3)."""
        return torch.softmax(logits, dim=-3)[..., 1, :, :]

    def upsample_logits(self, logits: torch.Tensor) -> torch.Tensor:
        """Bilinear upsample of the 2-channel logit map to full resolution.

        Upsampling happens in logit space, not probability space: the
        decision boundary of interpolated logits is controlled by the
        logit ratios of neighboring cells, so sub-cell boundary placement
        survives confidence saturation (interpolated saturated
        probabilities pin every crossing to cell midpoints, which flattens
        achievable F1 regardless of training).
        """
        squeeze = logits.dim() == 3
        if squeeze:
            logits = logits.unsqueeze(0)
        up = F.interpolate(
            logits,
            scale_factor=self.latent_stride,
            mode="bilinear",
            align_corners=False,
        )
        return up.squeeze(0) if squeeze else up

    def full_probs(self, logits: torch.Tensor) -> torch.Tensor:
        """Full-resolution P(manipulated): upsample logits, then softmax.

        The same field is used for the training loss and for decoding, so
        the optimizer shapes exactly the surface that gets thresholded.
        """
        return self.logits_to_probs(self.upsample_logits(logits))

    def logits_to_mask(self, logits: torch.Tensor, threshold: float = 0.5) -> np.ndarray:
        """Decode logits to a full-resolution {0, 1} mask.

        A pixel is manipulated iff the upsampled P(manipulated) >= threshold.
        """
        if not 0.0 < threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {threshold}")
        with torch.no_grad():
            mask = (self.full_probs(logits) >= threshold).to(torch.uint8)
        return mask.cpu().numpy()

    def logits_to_embedding(self, logits: torch.Tensor) -> MaskEmbedding:
        """Soft re-embedding: probability-weighted average of the class rows.

        Feeds predicted masks back into embedding space for the
        deterministic sampler; output cells stay on the segment between
        the two normalized rows.
        """
        probs = torch.softmax(logits, dim=-3)
        ntable = self.normalized_table()
        # (..., 2, h, w) x (2, D) -> (..., D, h, w)
        values = torch.einsum("...chw,cd->...dhw", probs, ntable)
        lo, hi = table_range(self.table)
        return MaskEmbedding(values=values, norm_lo=lo.detach(), norm_hi=hi.detach())

    def embedding_to_mask(self, emb: MaskEmbedding) -> torch.Tensor:
        """Nearest-row decode at latent resolution (round-trip checks)."""
        ntable = self.normalized_table()
        values = emb.values.movedim(-3, -1)
        d = torch.cdist(
            values.reshape(-1, self.embed_dim).unsqueeze(0), ntable.unsqueeze(0)
        ).squeeze(0)
        return d.argmin(dim=-1).reshape(values.shape[:-1])
