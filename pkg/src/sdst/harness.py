"""Optimization loop, evaluation, gradient checker and offset diagnostics.

Runs are bit-reproducible given (config, seed): a single seeded generator
drives initialization, batch order and every stochastic regularizer, and
training is pinned to one CPU thread.
"""

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import metrics as M
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import RunConfig, dump_config, from_dict
from .features import FeatureDataset
from .losses import compute_losses
from .model import SdstModel
from .numerics import seed_all
from .attention import weighted_offsets

import yaml


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def load_tensors(dataset: FeatureDataset, pooling: str):
    video, text = dataset.pooled(pooling)
    video_t = torch.from_numpy(video)          # (N, K, T, F_v)
    text_t = torch.from_numpy(text)            # (N, K, L, F_t)
    targets = []
    for ann in dataset.annotations:
        targets.append({
            "moments": torch.tensor(ann.moments, dtype=torch.float32),
            "saliency": torch.tensor(ann.saliency, dtype=torch.bool),
        })
    return video_t, text_t, targets


def check_compat(cfg: RunConfig, dataset: FeatureDataset) -> None:
    shape = dataset.shape
    problems = []
    if shape["k"] != cfg.model.n_levels:
        problems.append(f"levels {shape['k']} != {cfg.model.n_levels}")
    if shape["f_v"] != cfg.model.video_dim:
        problems.append(f"video dim {shape['f_v']} != {cfg.model.video_dim}")
    if shape["f_t"] != cfg.model.text_dim:
        problems.append(f"text dim {shape['f_t']} != {cfg.model.text_dim}")
    if problems:
        raise ValueError("config mismatch: " + "; ".join(problems))


def level_batches(video_t, text_t, idx):
    """Slice a batch and split it into the per-level (v, t) pairs."""
    v = video_t[idx]
    t = text_t[idx]
    k = v.shape[1]
    return [(v[:, lvl], t[:, lvl]) for lvl in range(k)]


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def lr_multiplier(step: int, epoch: int, cfg) -> float:
    """Linear warmup from warmup_ratio to 1, then step decay per epochs."""
    if cfg.warmup_iters > 0 and step < cfg.warmup_iters:
        frac = step / cfg.warmup_iters
        return cfg.warmup_ratio + (1.0 - cfg.warmup_ratio) * frac
    if cfg.decay_every_epochs > 0:
        return cfg.decay_factor ** (epoch // cfg.decay_every_epochs)
    return 1.0


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    out_dir: str
    final_checkpoint: str
    best_checkpoint: str
    steps: int
    last_loss: float


def train(cfg: RunConfig) -> TrainResult:
    if not cfg.out_dir:
        raise ValueError("config.out_dir must be set")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    seed_all(cfg.seed)

    dataset = FeatureDataset(cfg.data.train_dir)
    check_compat(cfg, dataset)
    video_t, text_t, targets = load_tensors(dataset, cfg.data.pooling)
    val = None
    if cfg.data.val_dir:
        val = FeatureDataset(cfg.data.val_dir)
        check_compat(cfg, val)

    model = SdstModel(cfg.model)
    # the embedded checkpoint config omits the output path: a checkpoint
    # records provenance, not where it was written
    ckpt_yaml = dump_config(dataclasses.replace(cfg, out_dir=""))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.optim.lr,
                            betas=(cfg.optim.beta1, cfg.optim.beta2),
                            eps=cfg.optim.eps,
                            weight_decay=cfg.optim.weight_decay)
    (out / "resolved_config.yaml").write_text(dump_config(cfg))

    order_gen = torch.Generator().manual_seed(cfg.seed + 1)
    n = len(dataset)
    bs = cfg.optim.batch_size
    loss_log = open(out / "loss_log.csv", "w", newline="")
    loss_writer = csv.writer(loss_log)
    loss_writer.writerow(["step", "component", "value"])
    trace_log = open(out / "offset_trace.csv", "w", newline="")
    trace_writer = csv.writer(trace_log)
    trace_writer.writerow(["step", "level", "head", "mean_weighted_offset"])
    metric_log = open(out / "metrics_log.csv", "w", newline="")
    metric_writer = csv.writer(metric_log)
    metric_writer.writerow(["epoch", "metric", "value"])

    best_score = -math.inf
    best_path = str(out / "best.ckpt")
    final_path = str(out / "final.ckpt")
    step = 0
    last_loss = float("nan")
    done = False
    max_steps = cfg.optim.max_steps or (cfg.optim.epochs
                                        * max(1, math.ceil(n / bs)))
    model.train()
    for epoch in range(cfg.optim.epochs):
        if done:
            break
        perm = torch.randperm(n, generator=order_gen)
        for lo in range(0, n, bs):
            idx = perm[lo:lo + bs]
            levels = level_batches(video_t, text_t, idx)
            batch_targets = [targets[i] for i in idx.tolist()]
            outputs = model(levels)
            loss, parts = compute_losses(outputs, batch_targets, cfg.loss)
            if not torch.isfinite(loss):
                dump = {"step": step, "epoch": epoch,
                        "batch_ids": [dataset.annotations[i].sample_id
                                      for i in idx.tolist()]}
                (out / "divergence.json").write_text(json.dumps(dump))
                raise TrainingDiverged(
                    f"non-finite loss at step {step}; offending batch ids "
                    f"written to divergence.json: {dump['batch_ids']}")
            mult = lr_multiplier(step, epoch, cfg.optim)
            for group in opt.param_groups:
                group["lr"] = cfg.optim.lr * mult
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(),
                                           cfg.optim.clip_norm)
            opt.step()
            last_loss = float(loss.detach())
            if step % max(1, cfg.log_every) == 0:
                _log_components(loss_writer, step, loss, parts)
                _log_offsets(trace_writer, step, outputs)
                loss_log.flush()
                trace_log.flush()
            step += 1
            if step >= max_steps:
                done = True
                break
        if (val is not None and cfg.eval_every_epochs > 0
                and (epoch + 1) % cfg.eval_every_epochs == 0):
            model.eval()
            report = evaluate_model(model, val, cfg.data.pooling)
            model.train()
            for name, value in report.items():
                if isinstance(value, float):
                    metric_writer.writerow([epoch, name, f"{value:.6f}"])
            metric_log.flush()
            score = report["mAP"]
            if score > best_score:
                best_score = score
                save_checkpoint(best_path, model, ckpt_yaml,
                                {"epoch": epoch, "step": step,
                                 "mAP": score})
    save_checkpoint(final_path, model, ckpt_yaml, {"step": step})
    if best_score == -math.inf:
        save_checkpoint(best_path, model, ckpt_yaml, {"step": step})
    loss_log.close()
    trace_log.close()
    metric_log.close()
    return TrainResult(out_dir=str(out), final_checkpoint=final_path,
                       best_checkpoint=best_path, steps=step,
                       last_loss=last_loss)


def _log_components(writer, step, loss, parts):
    writer.writerow([step, "total", f"{float(loss.detach()):.8f}"])
    for name in ("saliency", "actionness", "align_video", "align_layer"):
        writer.writerow([step, name, f"{float(parts[name].detach()):.8f}"])
    for name in ("cls", "l1", "iou"):
        for lvl, value in enumerate(parts[name]):
            writer.writerow([step, f"{name}_l{lvl}",
                             f"{float(value.detach()):.8f}"])


def _log_offsets(writer, step, outputs):
    for lvl, (off, sc) in enumerate(zip(outputs.offsets,
                                        outputs.offset_scores)):
        if off is None:
            continue
        means = weighted_offsets(off.detach(),
                                 sc.detach()).reshape(-1,
                                                      off.shape[-2]).mean(0)
        for head, value in enumerate(means.tolist()):
            writer.writerow([step, lvl, head, f"{value:.6f}"])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predictions_for_batch(model, levels):
    """Run inference and post-process into ranked scored moments."""
    with torch.no_grad():
        outputs = model(levels)
    p = outputs.cls_probs[-1]
    a = outputs.actionness
    moments = outputs.moments[-1]
    batch = p.shape[0]
    ranked = []
    for s in range(batch):
        cands = [M.ScoredMoment(float(moments[s, q, 0]),
                                float(moments[s, q, 1]),
                                M.confidence(float(p[s, q]),
                                             float(a[s, q])))
                 for q in range(p.shape[1])]
        ranked.append(M.soft_nms(cands))
    return ranked, outputs


def evaluate_model(model, dataset: FeatureDataset, pooling: str,
                   batch_size: int = 32) -> dict:
    model.eval()
    video_t, text_t, _ = load_tensors(dataset, pooling)
    n = len(dataset)
    ranked_all = []
    saliency_all = []
    for lo in range(0, n, batch_size):
        idx = torch.arange(lo, min(lo + batch_size, n))
        ranked, outputs = predictions_for_batch(
            model, level_batches(video_t, text_t, idx))
        ranked_all.extend(ranked)
        saliency_all.extend(outputs.saliency.tolist())
    gts = [[tuple(m) for m in ann.moments] for ann in dataset.annotations]
    preds_seg = [[(c.start, c.end) for c in cands] for cands in ranked_all]
    r1, _ = M.recall_at_1(preds_seg, gts)
    per_thr, mean_map = M.mean_average_precision(ranked_all, gts)
    top1 = [cands[0] if cands else None for cands in ranked_all]
    miou = M.mean_iou(top1, gts)
    hd_ap, hd_hit, counted = [], [], 0
    for scores, ann in zip(saliency_all, dataset.annotations):
        ap, hit, excluded = M.highlight_metrics(scores, ann.saliency)
        if not excluded:
            hd_ap.append(ap)
            hd_hit.append(hit)
            counted += 1
    report = {f"R1@{thr}": v for thr, v in r1.items()}
    report.update({f"mAP@{thr}": v for thr, v in per_thr.items()})
    report["mAP"] = mean_map
    report["mIoU"] = miou
    report["HD-mAP"] = sum(hd_ap) / counted if counted else 0.0
    report["HIT@1"] = sum(hd_hit) / counted if counted else 0.0
    return report


def evaluate(checkpoint_path, dataset_dir, out_dir=None) -> dict:
    model, cfg = load_model(checkpoint_path)
    dataset = FeatureDataset(dataset_dir)
    check_compat(cfg, dataset)
    report = evaluate_model(model, dataset, cfg.data.pooling)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for name, value in report.items():
            thr = None
            base = name
            if name.startswith(("R1@", "mAP@")):
                base, _, t = name.partition("@")
                thr = float(t)
            entries.append({"name": base, "value": value, "threshold": thr})
        M.write_reports(entries, out / "metrics.txt", out / "metrics.json")
    return report


def load_model(checkpoint_path):
    state, config_yaml, _ = load_checkpoint(checkpoint_path)
    cfg = from_dict(yaml.safe_load(config_yaml))
    model = SdstModel(cfg.model)
    restore_model(model, state)
    model.eval()
    return model, cfg


# ---------------------------------------------------------------------------
# offset diagnostics
# ---------------------------------------------------------------------------

def inspect_offsets(checkpoint_path, dataset_dir, out_dir) -> dict:
    model, cfg = load_model(checkpoint_path)
    if cfg.model.attention == "standard_ca":
        raise ValueError("no-offsets")
    dataset = FeatureDataset(dataset_dir)
    check_compat(cfg, dataset)
    video_t, text_t, _ = load_tensors(dataset, cfg.data.pooling)
    n = len(dataset)
    sums = None
    count = 0
    for lo in range(0, n, 32):
        idx = torch.arange(lo, min(lo + 32, n))
        with torch.no_grad():
            outputs = model(level_batches(video_t, text_t, idx))
        per_level = []
        for off, sc in zip(outputs.offsets, outputs.offset_scores):
            d = weighted_offsets(off, sc)            # (B, M, H)
            per_level.append(d.sum(dim=(0, 1)))
        stacked = torch.stack(per_level)             # (K, H)
        sums = stacked if sums is None else sums + stacked
        count += idx.shape[0] * model.cfg.n_queries
    means = (sums / count).numpy()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "offset_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "head", "mean_weighted_offset"])
        for lvl in range(means.shape[0]):
            for head in range(means.shape[1]):
                writer.writerow([lvl, head, f"{means[lvl, head]:.6f}"])
    beyond = bool((np.abs(means) > 1.0).any())
    summary = {"attention": cfg.model.attention,
               "means": means.tolist(),
               "beyond_boundaries": beyond}
    (out / "offset_summary.json").write_text(json.dumps(summary, indent=2))
    return summary


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------

def param_count(cfg: RunConfig):
    """(total trainable parameters, per-module breakdown)."""
    model = SdstModel(cfg.model)
    breakdown = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        top = name.split(".")[0]
        if top == "layers":
            parts = name.split(".")
            top = f"layers.{parts[1]}.{parts[2]}"
        breakdown[top] = breakdown.get(top, 0) + p.numel()
    return sum(breakdown.values()), breakdown


def resolve_out_dir(explicit: str, tag: str) -> str:
    if explicit:
        return explicit
    root = os.environ.get("SDST_OUT_ROOT", "runs")
    return str(Path(root) / tag)
