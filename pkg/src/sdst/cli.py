"""Command-line surface: gen-synth, train, eval, grad-check,
inspect-offsets, param-count."""

import argparse
import json
import sys
import time

from . import harness
from .config import (RunConfig, apply_overrides, load_config)
from .features import SynthConfig, synth_generate


def _add_config_args(p):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, args.overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sdst", description="Sparse-dense side-tuner, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    for field, default in (("num-samples", 32), ("t", 32), ("l-v", 4),
                           ("f-v", 64), ("f-t", 32), ("l-text", 6),
                           ("k", 4), ("max-moments", 3)):
        p.add_argument(f"--{field}", type=int, default=default)
    p.add_argument("--noise-sigma", type=float, default=0.25)

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="")

    p = sub.add_parser("grad-check", help="finite-difference gradient check")
    p.add_argument("--selector", default="all")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inspect-offsets", help="weighted-offset diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("param-count", help="trainable parameter count")
    _add_config_args(p)

    args = parser.parse_args(argv)

    if args.command == "gen-synth":
        cfg = SynthConfig(num_samples=args.num_samples, t=args.t,
                          l_v=args.l_v, f_v=args.f_v, f_t=args.f_t,
                          l_text=args.l_text, k=args.k,
                          max_moments=args.max_moments,
                          noise_sigma=args.noise_sigma)
        synth_generate(cfg, args.seed, args.out)
        print(f"wrote {cfg.num_samples} samples to {args.out}")
        return 0

    if args.command == "train":
        cfg = _resolve_config(args)
        cfg.out_dir = harness.resolve_out_dir(
            cfg.out_dir, f"train-{int(time.time())}")
        result = harness.train(cfg)
        print(f"trained {result.steps} steps; final loss "
              f"{result.last_loss:.4f}; checkpoints in {result.out_dir}")
        return 0

    if args.command == "eval":
        report = harness.evaluate(args.checkpoint, args.dataset,
                                  args.out or None)
        for name, value in report.items():
            print(f"{name} = {value:.4f}")
        return 0

    if args.command == "grad-check":
        t0 = time.time()
        reports = harness_grad_check(args.selector, args.seed)
        failed = False
        for r in reports:
            status = "pass" if r.ok else "FAIL"
            failed |= not r.ok
            print(f"{status} {r.name}: max rel err {r.max_rel_err:.3e} "
                  f"({r.n_coords} coords, worst {r.worst})")
        print(f"grad-check finished in {time.time() - t0:.1f}s")
        return 1 if failed else 0

    if args.command == "inspect-offsets":
        summary = harness.inspect_offsets(args.checkpoint, args.dataset,
                                          args.out)
        print(json.dumps(summary, indent=2))
        return 0

    if args.command == "param-count":
        cfg = _resolve_config(args)
        total, breakdown = harness.param_count(cfg)
        for name in sorted(breakdown):
            print(f"{name}: {breakdown[name]}")
        print(f"total: {total}")
        return 0

    return 2


def harness_grad_check(selector, seed):
    from .gradcheck import grad_check
    return grad_check(selector, seed)


if __name__ == "__main__":
    sys.exit(main())
