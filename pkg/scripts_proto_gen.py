"""Prototype of the scaled generalization experiment (dev only)."""
import json
import pathlib
import time

import numpy as np
import torch

torch.set_num_threads(2)

import tamperdiff as td
from tamperdiff.data import make_base_images, synth_forgery, load_manifest
from tamperdiff.evaluation import evaluate_manifest
from tamperdiff.schedule import make_schedule
from tamperdiff.training import train_loop
from tamperdiff.model import load_checkpoint

ROOT = pathlib.Path("/tmp/tamperdiff_proto")
DATA = ROOT / "data"
t_all = time.time()

if not (DATA / "train.manifest").exists():
    DATA.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(42)
    bases_train = make_base_images(rng, 48, 64)
    bases_test = make_base_images(rng, 16, 64)
    synth_forgery(bases_train, rng, 500, DATA, split="train")
    synth_forgery(bases_test, rng, 100, DATA, split="test")
    print("data built", flush=True)

train_man = load_manifest(DATA / "train.manifest")
test_man = load_manifest(DATA / "test.manifest")

results = {}
for mode in ("iml", "ciml"):
    cfg = td.ExperimentConfig()
    cfg.seed = 0
    cfg.train.mode = mode
    cfg.train.batch_size = 12
    cfg.train.learning_rate = 2.5e-4
    cfg.train.epochs = 50
    cfg.train.checkpoint_every = 25
    out = ROOT / f"run-{mode}"
    t0 = time.time()
    final = train_loop(cfg, train_man, out)
    print(f"{mode} trained in {(time.time()-t0)/60:.1f} min", flush=True)
    model, cfg2, _ = load_checkpoint(final)
    sched = make_schedule(cfg2.schedule.T, cfg2.schedule.beta_start, cfg2.schedule.beta_end)
    r1 = evaluate_manifest(model, cfg2, sched, test_man, mode, steps=1, seed=0)
    r0 = evaluate_manifest(model, cfg2, sched, test_man, mode, zero_noise=True)
    r3 = evaluate_manifest(model, cfg2, sched, test_man, mode, steps=3, seed=0)
    results[mode] = {"S1": r1.summary["f1"], "zero": r0.summary["f1"], "S3": r3.summary["f1"],
                     "iou": r1.summary["iou"], "auc": r1.summary["auc"]}
    print(mode, json.dumps(results[mode], indent=None), flush=True)

print("TOTAL MIN:", (time.time() - t_all) / 60)
print(json.dumps(results, indent=2))
