"""Diffusion schedules and the forward/reverse update rules.

Everything in this module is plain numerical math: no networks, no I/O.
Schedule arithmetic runs in float64 end to end; callers that work in a
lower precision get the cast for free when the scalar coefficients touch
their arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

__all__ = [
    "NoiseSchedule",
    "TimestepSubsequence",
    "NoisyState",
    "make_schedule",
    "make_subsequence",
    "q_sample",
    "ddpm_step",
    "ddim_step",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha/alpha-bar/sigma sequences for T steps.

    Arrays are float64 and indexed by ``t - 1`` (timesteps run 1..T).
    Use :meth:`alpha_bar` and friends for timestep-indexed access; they
    also honor the ``alpha_bar(0) == 1`` convention used by the
    deterministic sampler.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    sigmas: np.ndarray = field(repr=False)
    sigma_mode: str = "beta"

    def _check_t(self, t: int, low: int = 1) -> None:
        if not low <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{low}, {self.T}]")

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product of alphas up to t, with alpha_bar(0) = 1."""
        self._check_t(t, low=0)
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def sigma(self, t: int) -> float:
        self._check_t(t)
        return float(self.sigmas[t - 1])


@dataclass(frozen=True)
class TimestepSubsequence:
    """Strictly increasing timesteps tau_1 < ... < tau_S within [1, T]."""

    taus: tuple
    S: int

    def __post_init__(self) -> None:
        if len(self.taus) != self.S or self.S < 1:
            raise ValueError("subsequence length must equal S >= 1")
        if any(b <= a for a, b in zip(self.taus, self.taus[1:])):
            raise ValueError(f"timesteps must be strictly increasing: {self.taus}")


@dataclass
class NoisyState:
    """A diffusion state: latent-resolution values at a given timestep."""

    values: Any
    timestep: int


def make_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    sigma_mode: str = "beta",
) -> NoiseSchedule:
    """Build a linear beta schedule over T steps.

    ``sigma_mode`` picks the reverse-step variance scale: ``"beta"`` uses
    sigma_t = beta_t, ``"scaled_beta"`` uses (1 - alpha_t) / sqrt(1 -
    alpha_bar_t) * beta_t.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if sigma_mode == "beta":
        sigmas = betas.copy()
    elif sigma_mode == "scaled_beta":
        sigmas = (1.0 - alphas) / np.sqrt(1.0 - alpha_bars) * betas
    else:
        raise ValueError(f"unknown sigma_mode {sigma_mode!r}")
    return NoiseSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sigmas=sigmas,
        sigma_mode=sigma_mode,
    )


def make_subsequence(T: int, S: int) -> TimestepSubsequence:
    """S evenly spaced timesteps with uniform stride, anchored so the last is T.

    (T=1000, S=1) -> [1000]; (T=1000, S=4) -> [250, 500, 750, 1000];
    (T=10, S=10) -> [1..10].
    """
    if not 1 <= S <= T:
        raise ValueError(f"need 1 <= S <= T, got S={S}, T={T}")
    stride = T // S
    taus = tuple(T - (S - 1 - i) * stride for i in range(S))
    return TimestepSubsequence(taus=taus, S=S)


def _check_shapes(a: Any, b: Any, what: str) -> None:
    sa, sb = tuple(a.shape), tuple(b.shape)
    if sa != sb:
        raise ValueError(f"{what}: shape mismatch {sa} vs {sb}")


def q_sample(x0: Any, t: int, eps: Any, schedule: NoiseSchedule) -> NoisyState:
    """Forward noising: x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    schedule._check_t(t)
    _check_shapes(x0, eps, "q_sample")
    ab = schedule.alpha_bar(t)
    values = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    return NoisyState(values=values, timestep=t)


def ddpm_step(
    x_t: NoisyState, eps_pred: Any, schedule: NoiseSchedule, z: Any
) -> NoisyState:
    """One ancestral reverse step.

    x_{t-1} = (x_t - (1 - a_t) / sqrt(1 - ab_t) * eps_pred) / sqrt(a_t)
              + sigma_t * z

    Kept for completeness; the production sampler is deterministic and
    uses :func:`ddim_step`.
    """
    t = x_t.timestep
    if t < 1:
        raise ValueError("cannot step below timestep 1 (already at x_0)")
    _check_shapes(x_t.values, eps_pred, "ddpm_step")
    a = schedule.alpha(t)
    ab = schedule.alpha_bar(t)
    mean = (x_t.values - (1.0 - a) / math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(a)
    values = mean + schedule.sigma(t) * z
    return NoisyState(values=values, timestep=t - 1)


def ddim_step(
    x_tau: NoisyState,
    x0_hat: Any,
    tau_s: int,
    tau_prev: int,
    schedule: NoiseSchedule,
) -> NoisyState:
    """Deterministic reverse jump from tau_s to tau_prev.

    x_prev = sqrt(ab_prev) * x0_hat
             + sqrt(1 - ab_prev) / sqrt(1 - ab_s) * (x_tau - sqrt(ab_s) * x0_hat)

    With the alpha_bar(0) = 1 convention, tau_prev = 0 collapses to x0_hat
    exactly. No noise is injected anywhere.
    """
    if tau_prev >= tau_s:
        raise ValueError(f"tau_prev ({tau_prev}) must be < tau_s ({tau_s})")
    schedule._check_t(tau_s)
    schedule._check_t(tau_prev, low=0)
    if x_tau.timestep != tau_s:
        raise ValueError(f"state is at t={x_tau.timestep}, expected tau_s={tau_s}")
    _check_shapes(x_tau.values, x0_hat, "ddim_step")
    ab_s = schedule.alpha_bar(tau_s)
    ab_prev = schedule.alpha_bar(tau_prev)
    direction = x_tau.values - math.sqrt(ab_s) * x0_hat
    values = (
        math.sqrt(ab_prev) * x0_hat
        + math.sqrt(1.0 - ab_prev) / math.sqrt(1.0 - ab_s) * direction
    )
    return NoisyState(values=values, timestep=tau_prev)
