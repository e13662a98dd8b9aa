#!/usr/bin/env python3
"""Train the attention-strategy / pooling ablation grids on synthetic data.

Reproduces the direction of the paper-style comparisons at desk scale:
  attention: rdsa vs deformable_ca vs standard_ca   (held-out mAP ordering)
  pooling:   adaptive vs avg vs cls                 (held-out mAP ordering)

Usage:
  python scripts/run_ablation.py --axis attention --seeds 0 1 2 \
      --train-dir data/train256 --val-dir data/val64 --out runs/ablation
"""

import argparse
import json
from pathlib import Path

from sdst import harness
from sdst.config import DataConfig, ModelConfig, OptimConfig, RunConfig
from sdst.features import FeatureDataset


def smoke_config(train_dir, val_dir, out_dir, attention="rdsa",
                 pooling="adaptive", seed=0, steps=1500, lr=3e-4):
    return RunConfig(
        model=ModelConfig(dim=64, video_dim=64, text_dim=32, n_levels=4,
                          n_queries=10, n_heads=8, dropout=0.1,
                          droppath=0.1, attention=attention, latent_dim=64,
                          cnn_hidden=64),
        optim=OptimConfig(lr=lr, batch_size=32, epochs=10**6,
                          max_steps=steps, warmup_iters=100,
                          decay_every_epochs=0),
        data=DataConfig(train_dir=str(train_dir), val_dir=str(val_dir),
                        pooling=pooling),
        seed=seed, out_dir=str(out_dir), log_every=200)


def run_cell(train_dir, val_dir, out_root, attention, pooling, seed, steps):
    out = Path(out_root) / f"{attention}-{pooling}-s{seed}"
    cfg = smoke_config(train_dir, val_dir, out, attention, pooling, seed,
                       steps)
    result = harness.train(cfg)
    model, _ = harness.load_model(result.final_checkpoint)
    report = harness.evaluate_model(model, FeatureDataset(val_dir), pooling)
    report_path = out / "val_report.json"
    report_path.write_text(json.dumps(report, indent=2))
    return result, report


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--axis", choices=["attention", "pooling"],
                    required=True)
    ap.add_argument("--train-dir", required=True)
    ap.add_argument("--val-dir", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=1500)
    args = ap.parse_args()

    if args.axis == "attention":
        cells = [(a, "adaptive") for a in
                 ("rdsa", "deformable_ca", "standard_ca")]
    else:
        cells = [("rdsa", p) for p in ("adaptive", "avg", "cls")]

    summary = {}
    for attention, pooling in cells:
        maps = []
        for seed in args.seeds:
            _, report = run_cell(args.train_dir, args.val_dir, args.out,
                                 attention, pooling, seed, args.steps)
            maps.append(report["mAP"])
            print(f"{attention}/{pooling} seed {seed}: "
                  f"mAP {report['mAP']:.4f}  R1@0.5 {report['R1@0.5']:.4f}")
        key = attention if args.axis == "attention" else pooling
        summary[key] = sum(maps) / len(maps)
    print(json.dumps(summary, indent=2))
    Path(args.out, f"{args.axis}_summary.json").write_text(
        json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
