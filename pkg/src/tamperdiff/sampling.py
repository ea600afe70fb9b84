"""Deterministic mask generation and trajectory-based uncertainty.

Inference starts from seeded Gaussian noise and walks a timestep
subsequence with the deterministic update rule; each step's predicted
mask re-enters embedding space for the next jump. The step count S is a
pure inference-time knob (one denoiser call per step), and the per-step
masks double as an uncertainty signal: pixels that keep flipping between
steps are the unreliable ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .conditioner import GuidanceCondition
from .model import Localizer
from .schedule import NoiseSchedule, NoisyState, ddim_step, make_subsequence

__all__ = [
    "TrajectoryStep",
    "SamplingTrajectory",
    "sample",
    "sample_zero_noise",
    "uncertainty_map",
]


@dataclass
class TrajectoryStep:
    timestep: int
    logits: torch.Tensor     # (2, h, w) at latent resolution
    probs: np.ndarray        # (H, W) upsampled P(manipulated)
    mask: np.ndarray         # (H, W) {0, 1}


@dataclass
class SamplingTrajectory:
    steps: list[TrajectoryStep]
    final_mask: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.steps)


def _predict_step(
    model: Localizer,
    x: torch.Tensor,
    conditions: tuple[GuidanceCondition, ...],
    t: int,
    threshold: float,
) -> TrajectoryStep:
    logits = model.denoise(x, conditions, torch.tensor([t]))
    probs = model.codec.full_probs(logits)
    probs_np = probs.squeeze(0).cpu().numpy()
    mask = (probs_np >= threshold).astype(np.uint8)
    return TrajectoryStep(
        timestep=t, logits=logits.squeeze(0).detach(), probs=probs_np, mask=mask
    )


@torch.no_grad()
def sample(
    model: Localizer,
    conditions: tuple[GuidanceCondition, ...],
    schedule: NoiseSchedule,
    S: int,
    seed: int,
    threshold: float = 0.5,
) -> SamplingTrajectory:
    """Run S-step deterministic inference for a single image.

    Fully determined by (weights, conditions, seed): the only randomness
    is the seeded starting noise. The final jump targets timestep 0, so
    the last state collapses onto the last prediction exactly.
    """
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    model.eval()
    h = w = None
    for cond in conditions:
        if cond.features.shape[0] != 1:
            raise ValueError("sample() runs one image at a time")
        h, w = cond.features.shape[-2:]
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(1, model.codec.embed_dim, h, w, generator=gen)

    taus = make_subsequence(schedule.T, S).taus
    state = NoisyState(values=x, timestep=taus[-1])
    steps: list[TrajectoryStep] = []
    for i in range(S - 1, -1, -1):
        tau_s = taus[i]
        tau_prev = taus[i - 1] if i > 0 else 0
        step = _predict_step(model, state.values, conditions, tau_s, threshold)
        steps.append(step)
        emb = model.codec.logits_to_embedding(step.logits.unsqueeze(0))
        state = ddim_step(state, emb.values, tau_s, tau_prev, schedule)
    return SamplingTrajectory(steps=steps, final_mask=steps[-1].mask)


@torch.no_grad()
def sample_zero_noise(
    model: Localizer,
    conditions: tuple[GuidanceCondition, ...],
    schedule: NoiseSchedule,
    threshold: float = 0.5,
) -> SamplingTrajectory:
    """No-diffusion baseline: one denoiser call on an all-zeros state at
    timestep T. Deterministic without any seed."""
    model.eval()
    h, w = conditions[0].features.shape[-2:]
    x = torch.zeros(1, model.codec.embed_dim, h, w)
    step = _predict_step(model, x, conditions, schedule.T, threshold)
    return SamplingTrajectory(steps=[step], final_mask=step.mask)


def uncertainty_map(traj: SamplingTrajectory) -> np.ndarray:
    """Per-pixel fraction of label flips between consecutive step masks.

    Normalized by (S - 1) so the scale is comparable across images;
    all-zeros for single-step trajectories.
    """
    masks = [s.mask for s in traj.steps]
    out = np.zeros(masks[0].shape, dtype=np.float64)
    if len(masks) == 1:
        return out
    for prev, cur in zip(masks, masks[1:]):
        out += prev != cur
    return out / (len(masks) - 1)
