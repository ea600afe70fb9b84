"""Command-line entry point: train / infer / eval / visualize / synth.

All tunables live in the experiment config file; flags override the few
inference-time knobs. Exit codes: 0 success, 1 usage or config error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .conditioner import TaskMode
from .config import ConfigError, load_config
from .data import (
    DataError,
    load_manifest,
    make_base_images,
    synth_forgery,
    to_model_input,
    write_mask,
)
from .evaluation import evaluate_manifest, write_report
from .model import load_checkpoint
from .sampling import sample, sample_zero_noise, uncertainty_map
from .schedule import make_schedule
from .training import train_loop

USAGE_EXIT, RUNTIME_EXIT = 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise SystemExit(self._usage_exit(message))

    def _usage_exit(self, message: str) -> int:
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        return USAGE_EXIT


def _build_parser() -> _Parser:
    p = _Parser(prog="tamperdiff", description=__doc__)
    p.add_argument("--version", action="version", version=f"tamperdiff {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a localizer from a config file")
    t.add_argument("--config", required=True, help="experiment config (YAML)")
    t.add_argument("--out", default="runs/train", help="output directory")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")

    i = sub.add_parser("infer", help="predict a mask for one image (or pair)")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True, help="forged image")
    i.add_argument("--original", default=None, help="pristine original (pair mode)")
    i.add_argument("--mode", choices=["iml", "ciml"], default=None)
    i.add_argument("--steps", type=int, default=None, help="sampling step count")
    i.add_argument("--seed", type=int, default=None)
    i.add_argument("--threshold", type=float, default=None)
    i.add_argument("--zero-noise", action="store_true", help="no-diffusion baseline")
    i.add_argument("--out", required=True, help="output mask file ({0,255} PNG)")
    i.add_argument("--uncertainty", default=None, help="write uncertainty heatmap here")
    i.add_argument("--dump-trajectory", default=None, help="write per-step masks here")

    e = sub.add_parser("eval", help="score a checkpoint over a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--mode", choices=["iml", "ciml"], default=None)
    e.add_argument("--steps", type=int, default=None)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--threshold", type=float, default=None)
    e.add_argument("--zero-noise", action="store_true")
    e.add_argument("--out", default="runs/eval", help="report directory")

    v = sub.add_parser("visualize", help="render input/prediction/uncertainty panel")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--image", required=True)
    v.add_argument("--original", default=None)
    v.add_argument("--mode", choices=["iml", "ciml"], default=None)
    v.add_argument("--steps", type=int, default=5)
    v.add_argument("--seed", type=int, default=None)
    v.add_argument("--out", required=True, help="output panel PNG")

    s = sub.add_parser("synth", help="generate a synthetic splice dataset")
    s.add_argument("--out", required=True, help="dataset root directory")
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--bases", type=int, default=32, help="number of base images")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train")
    return p


def _load_image(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"image not found: {p}")
    with Image.open(p) as img:
        return np.asarray(img.convert("RGB"))


def _prepare_inference(args):
    model, cfg, _ = load_checkpoint(args.checkpoint)
    mode = args.mode
    if mode is None:
        mode = "ciml" if args.original else "iml"
    mode = TaskMode(mode)
    if mode is TaskMode.CIML and not args.original:
        raise ConfigError("ciml mode needs --original")
    if mode is TaskMode.IML and args.original:
        raise ConfigError("iml mode takes no --original")
    size = cfg.data.size

    def prep(path):
        arr = _load_image(path)
        if arr.shape[:2] != (size, size):
            arr = np.asarray(Image.fromarray(arr).resize((size, size), Image.BILINEAR))
        return to_model_input(arr, cfg.data.image_mean, cfg.data.image_std)

    forged = prep(args.image)
    original = prep(args.original) if args.original else None
    conditions = model.conditions(mode, forged, original)
    schedule = make_schedule(
        cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end,
        cfg.schedule.sigma_mode,
    )
    steps = args.steps if args.steps is not None else cfg.sampler.steps
    seed = args.seed if args.seed is not None else cfg.sampler.seed
    threshold = getattr(args, "threshold", None)
    if threshold is None:
        threshold = cfg.sampler.threshold
    return model, cfg, conditions, schedule, steps, seed, threshold


def _save_heatmap(values: np.ndarray, path: str | Path) -> None:
    """Map [0, 1] values onto a dark-blue -> yellow ramp."""
    v = np.clip(values, 0.0, 1.0)
    r = (255 * v).astype(np.uint8)
    g = (255 * v**1.5).astype(np.uint8)
    b = (90 + 110 * (1 - v)).astype(np.uint8)
    Image.fromarray(np.stack([r, g, b], axis=-1)).save(path)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if cfg.data.manifest is None:
        raise ConfigError("config data.manifest is required for training")
    manifest = load_manifest(cfg.data.manifest)
    final = train_loop(cfg, manifest, args.out, resume=args.resume)
    print(f"final checkpoint: {final}")
    return 0


def cmd_infer(args) -> int:
    model, _, conditions, schedule, steps, seed, threshold = _prepare_inference(args)
    if args.zero_noise:
        traj = sample_zero_noise(model, conditions, schedule, threshold)
    else:
        traj = sample(model, conditions, schedule, steps, seed, threshold)
    write_mask(traj.final_mask, args.out)
    print(f"mask: {args.out}")
    if args.uncertainty:
        _save_heatmap(uncertainty_map(traj), args.uncertainty)
        print(f"uncertainty: {args.uncertainty}")
    if args.dump_trajectory:
        out = Path(args.dump_trajectory)
        out.mkdir(parents=True, exist_ok=True)
        for i, step in enumerate(traj.steps, start=1):
            write_mask(step.mask, out / f"step{i:02d}_t{step.timestep:04d}.png")
        print(f"trajectory: {out} ({len(traj.steps)} steps)")
    return 0


def cmd_eval(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    mode = args.mode or cfg.train.mode
    if mode == "mixed":
        raise ConfigError("eval needs an explicit --mode for mixed-mode checkpoints")
    schedule = make_schedule(
        cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end,
        cfg.schedule.sigma_mode,
    )
    steps = args.steps if args.steps is not None else cfg.sampler.steps
    seed = args.seed if args.seed is not None else cfg.sampler.seed
    threshold = args.threshold if args.threshold is not None else cfg.sampler.threshold
    result = evaluate_manifest(
        model, cfg, schedule, manifest, mode,
        steps=steps, seed=seed, threshold=threshold, zero_noise=args.zero_noise,
    )
    report = write_report(result, args.out, config_hash=cfg.hash)
    print(f"report: {report}")
    print(
        "mean f1={f1:.4f} iou={iou:.4f} auc={auc:.4f}".format(
            f1=result.summary["f1"],
            iou=result.summary["iou"],
            auc=result.summary.get("auc", float("nan")),
        )
    )
    return 0


def cmd_visualize(args) -> int:
    args.zero_noise = False
    args.threshold = None
    model, _, conditions, schedule, steps, seed, threshold = _prepare_inference(args)
    traj = sample(model, conditions, schedule, steps, seed, threshold)
    unc = uncertainty_map(traj)
    base = _load_image(args.image)
    size = traj.final_mask.shape[0]
    if base.shape[:2] != (size, size):
        base = np.asarray(Image.fromarray(base).resize((size, size), Image.BILINEAR))
    overlay = base.copy()
    overlay[traj.final_mask != 0] = (
        0.45 * overlay[traj.final_mask != 0] + 0.55 * np.array([255, 40, 40])
    ).astype(np.uint8)
    mask_rgb = np.stack([traj.final_mask * 255] * 3, axis=-1).astype(np.uint8)
    v = np.clip(unc, 0, 1)
    heat = np.stack(
        [(255 * v), (255 * v**1.5), (90 + 110 * (1 - v))], axis=-1
    ).astype(np.uint8)
    panel = np.concatenate([base, overlay, mask_rgb, heat], axis=1)
    Image.fromarray(panel).save(args.out)
    print(f"panel: {args.out} (input | overlay | mask | uncertainty)")
    return 0


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    bases = make_base_images(rng, args.bases, args.size)
    manifest = synth_forgery(bases, rng, args.count, args.out, split=args.split)
    print(f"wrote {len(manifest.records)} samples under {args.out}")
    print(f"manifest: {Path(args.out) / (args.split + '.manifest')}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_EXIT
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (DataError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
