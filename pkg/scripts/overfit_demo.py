#!/usr/bin/env python3
"""Generate a 32-sample synthetic dataset, overfit it, report train metrics.

Runs in a few minutes on one CPU core:
  python scripts/overfit_demo.py --out runs/overfit
"""

import argparse
from pathlib import Path

from sdst import harness
from sdst.config import load_config
from sdst.features import FeatureDataset, SynthConfig, synth_generate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    out = Path(args.out)
    data = out / "data"
    if not (data / "meta.yaml").exists():
        synth_generate(SynthConfig(num_samples=32), args.seed, data)
    cfg = load_config(Path(__file__).parent.parent
                      / "configs" / "overfit_synth.yaml")
    cfg.data.train_dir = str(data)
    cfg.out_dir = str(out / "run")
    cfg.optim.max_steps = args.steps
    result = harness.train(cfg)
    model, _ = harness.load_model(result.final_checkpoint)
    report = harness.evaluate_model(model, FeatureDataset(data),
                                    cfg.data.pooling)
    for name in ("R1@0.5", "R1@0.7", "mAP", "mIoU", "HD-mAP", "HIT@1"):
        print(f"train {name}: {report[name]:.4f}")


if __name__ == "__main__":
    main()
