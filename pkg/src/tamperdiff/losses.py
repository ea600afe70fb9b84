"""Task-specific training losses: soft dice, weighted cross-entropy, and
their fixed linear mix."""

from __future__ import annotations

from dataclasses import dataclass

import torch

__all__ = ["LossConfig", "dice_loss", "weighted_ce", "combined_loss"]

# Probabilities are clamped away from {0, 1} before the logs.
CLIP_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    mu: float = 0.5        # positive-class weight
    eta: float = 2.5       # negative-class weight
    lambda_: float = 0.3   # cross-entropy share of the mix
    smooth: float = 1.0    # dice smoothing, keeps empty masks finite

    def __post_init__(self) -> None:
        if self.mu <= 0 or self.eta <= 0:
            raise ValueError("class weights must be positive")
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ValueError(f"lambda_ must be in [0, 1], got {self.lambda_}")
        if self.smooth < 0:
            raise ValueError("smooth must be >= 0")


def _check(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"pred/gt shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return gt.to(pred.dtype)


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft dice on probabilities: 1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s)."""
    gt = _check(pred, gt)
    inter = (pred * gt).sum()
    denom = pred.sum() + gt.sum() + smooth
    return 1.0 - (2.0 * inter + smooth) / denom


def weighted_ce(
    pred: torch.Tensor, gt: torch.Tensor, mu: float = 0.5, eta: float = 2.5
) -> torch.Tensor:
    """Class-weighted binary cross-entropy, averaged over pixels.

    mu weighs the manipulated class, eta the authentic class.
    """
    gt = _check(pred, gt)
    p = pred.clamp(CLIP_EPS, 1.0 - CLIP_EPS)
    ll = mu * gt * torch.log(p) + eta * (1.0 - gt) * torch.log(1.0 - p)
    return -ll.mean()


def combined_loss(
    pred: torch.Tensor, gt: torch.Tensor, config: LossConfig = LossConfig()
) -> torch.Tensor:
    """lambda * wce + (1 - lambda) * dice."""
    lam = config.lambda_
    return lam * weighted_ce(pred, gt, config.mu, config.eta) + (1.0 - lam) * dice_loss(
        pred, gt, config.smooth
    )
