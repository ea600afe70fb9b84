"""Training: the per-batch step and the full loop.

A run is fully determined by (config, seed): timestep and noise draws
come from one saved-and-restored torch generator, the per-epoch data
order is a pure function of (seed, epoch), and augmentation RNG is
seeded per (seed, epoch, sample). Resuming from a checkpoint therefore
reproduces the exact losses an uninterrupted run would have seen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .conditioner import TaskMode
from .data import DatasetManifest, ForgerySample, load_sample, preprocess, to_model_input
from .losses import LossConfig, combined_loss
from .model import Localizer, build_model, load_checkpoint, save_checkpoint
from .schedule import NoiseSchedule, make_schedule

__all__ = ["TrainState", "TrainingError", "sample_timesteps", "train_step", "train_loop"]


class TrainingError(RuntimeError):
    """Non-finite loss or other unrecoverable training failure."""


@dataclass
class TrainState:
    cfg: ExperimentConfig
    model: Localizer
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    epoch: int = 0
    step_in_epoch: int = 0
    global_step: int = 0
    loss_sum: float = 0.0
    loss_count: int = 0

    @property
    def mean_loss(self) -> float:
        return self.loss_sum / self.loss_count if self.loss_count else float("nan")

    def record(self, loss: float) -> None:
        self.loss_sum += loss
        self.loss_count += 1

    def rng_payload(self) -> dict:
        return {
            "torch_generator": self.generator.get_state(),
            "epoch": self.epoch,
            "step_in_epoch": self.step_in_epoch,
            "global_step": self.global_step,
            "optimizer": self.optimizer.state_dict(),
            "loss_sum": self.loss_sum,
            "loss_count": self.loss_count,
        }


def init_state(cfg: ExperimentConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.train.learning_rate,
        weight_decay=cfg.train.weight_decay,
    )
    generator = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(cfg=cfg, model=model, optimizer=optimizer, generator=generator)


def restore_state(path: str | Path) -> TrainState:
    model, cfg, extra = load_checkpoint(path)
    state = init_state(cfg)
    state.model = model
    if "optimizer" in extra:
        state.optimizer = torch.optim.AdamW(
            model.parameters(),
            lr=cfg.train.learning_rate,
            weight_decay=cfg.train.weight_decay,
        )
        state.optimizer.load_state_dict(extra["optimizer"])
    if "torch_generator" in extra:
        state.generator.set_state(extra["torch_generator"])
    state.epoch = extra.get("epoch", 0)
    state.step_in_epoch = extra.get("step_in_epoch", 0)
    state.global_step = extra.get("global_step", 0)
    state.loss_sum = extra.get("loss_sum", 0.0)
    state.loss_count = extra.get("loss_count", 0)
    return state


def sample_timesteps(n: int, T: int, generator: torch.Generator) -> torch.Tensor:
    """Uniform draws over [1, T] inclusive."""
    return torch.randint(1, T + 1, (n,), generator=generator)


def _batch_tensors(
    batch: list[ForgerySample], cfg: ExperimentConfig
) -> tuple[torch.Tensor, torch.Tensor | None, torch.Tensor, TaskMode]:
    modes = {s.mode for s in batch}
    if len(modes) != 1:
        raise TrainingError(f"batch mixes task modes: {sorted(m.value for m in modes)}")
    mode = modes.pop()
    mean, std = cfg.data.image_mean, cfg.data.image_std
    forged = to_model_input([s.forged for s in batch], mean, std)
    original = None
    if mode is TaskMode.CIML:
        original = to_model_input([s.original for s in batch], mean, std)
    gt = torch.from_numpy(np.stack([s.gt_mask for s in batch])).float()
    return forged, original, gt, mode


def train_step(
    batch: list[ForgerySample], state: TrainState, schedule: NoiseSchedule
) -> tuple[float, TrainState]:
    """One gradient-descent step on the combined loss.

    Per sample: embed the ground-truth mask, draw t and Gaussian noise,
    form x_t, predict the clean mask under the image conditions, and
    score the upsampled probabilities against the full-resolution mask.
    """
    cfg = state.cfg
    model = state.model
    model.train()
    forged, original, gt, mode = _batch_tensors(batch, cfg)

    conditions = model.conditions(mode, forged, original)
    x0 = model.codec.embed_mask(gt.numpy().astype(np.uint8)).values

    b = x0.shape[0]
    t = sample_timesteps(b, schedule.T, state.generator)
    eps = torch.randn(x0.shape, generator=state.generator)
    ab = torch.from_numpy(schedule.alpha_bars).float()[t - 1].view(b, 1, 1, 1)
    x_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps

    logits = model.denoise(x_t, conditions, t)
    probs = model.codec.full_probs(logits)
    loss_cfg = LossConfig(
        mu=cfg.loss.mu, eta=cfg.loss.eta, lambda_=cfg.loss.lambda_, smooth=cfg.loss.smooth
    )
    loss = combined_loss(probs, gt, loss_cfg)

    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {loss.item()} at step {state.global_step} "
            f"(mode={mode.value}, t={t.tolist()}, "
            f"samples={[s.source_id for s in batch]})"
        )

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.train.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
    state.optimizer.step()

    value = float(loss.detach())
    state.global_step += 1
    state.step_in_epoch += 1
    state.record(value)
    return value, state


class _SampleCache:
    """Loads each record once; re-applies augmentation per epoch when on."""

    def __init__(self, manifest: DatasetManifest, cfg: ExperimentConfig, mode: str):
        self.manifest = manifest
        self.cfg = cfg
        self.mode = mode
        self.raw: dict[tuple[int, str], ForgerySample] = {}

    def get(self, index: int, epoch: int, mode: TaskMode) -> ForgerySample:
        key = (index, mode.value)
        if key not in self.raw:
            self.raw[key] = load_sample(self.manifest, self.manifest.records[index], mode)
        raw = self.raw[key]
        d = self.cfg.data
        rng = None
        if d.jpeg_aug:
            rng = np.random.default_rng(
                (self.cfg.seed * 1_000_003 + epoch) * 1_000_003 + index
            )
        return preprocess(
            raw,
            size=d.size,
            jpeg_aug=d.jpeg_aug,
            rng=rng,
            quality_range=(d.jpeg_quality_min, d.jpeg_quality_max),
            aug_original=d.aug_original,
        )


def _check_resume_compatible(saved: ExperimentConfig, new: ExperimentConfig) -> None:
    """Everything but the train section must match the checkpoint exactly;
    a resumed run may only adjust how long/how it keeps training."""
    a, b = saved.to_dict(), new.to_dict()
    a.pop("train"), b.pop("train")
    if a != b:
        raise TrainingError(
            "resume config differs from the checkpoint beyond the train section"
        )


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(seed * 100_003 + epoch).permutation(n)


def _batch_mode(cfg_mode: str, batch_index: int) -> TaskMode:
    if cfg_mode == "mixed":
        return TaskMode.IML if batch_index % 2 == 0 else TaskMode.CIML
    return TaskMode(cfg_mode)


def train_loop(
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    out_dir: str | Path,
    resume: str | Path | None = None,
) -> Path:
    """Run the configured number of epochs; returns the final checkpoint path.

    Writes periodic checkpoints and a line-delimited loss log under
    ``out_dir``. With ``resume`` the loop continues exactly where the
    saved run left off, including mid-epoch positions.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume:
        state = restore_state(resume)
        _check_resume_compatible(state.cfg, cfg)
        state.cfg = cfg  # adopt the caller's train settings (e.g. more epochs)
    else:
        state = init_state(cfg)
    schedule = make_schedule(
        cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end,
        cfg.schedule.sigma_mode,
    )
    cache = _SampleCache(manifest, cfg, cfg.train.mode)
    n = len(manifest.records)
    if n == 0:
        raise TrainingError("empty dataset manifest")
    bs = cfg.train.batch_size
    batches_per_epoch = (n + bs - 1) // bs
    log_path = out_dir / "train_log.jsonl"
    final_path = out_dir / "checkpoint-final.pt"

    def _save(path: Path) -> None:
        save_checkpoint(path, state.model, cfg, extra=state.rng_payload())

    with open(log_path, "a") as log:
        while state.epoch < cfg.train.epochs:
            order = _epoch_order(cfg.seed, state.epoch, n)
            for bi in range(state.step_in_epoch, batches_per_epoch):
                idxs = order[bi * bs : (bi + 1) * bs]
                mode = _batch_mode(cfg.train.mode, bi)
                batch = [cache.get(int(i), state.epoch, mode) for i in idxs]
                loss, state = train_step(batch, state, schedule)
                if state.global_step % cfg.train.log_every == 0:
                    rec = {
                        "step": state.global_step,
                        "epoch": state.epoch,
                        "loss": loss,
                        "lr": cfg.train.learning_rate,
                        "mode": mode.value,
                    }
                    log.write(json.dumps(rec) + "\n")
                    log.flush()
            state.epoch += 1
            state.step_in_epoch = 0
            if cfg.train.checkpoint_every and state.epoch % cfg.train.checkpoint_every == 0:
                _save(out_dir / f"checkpoint-epoch{state.epoch:04d}.pt")
    _save(final_path)
    return final_path
