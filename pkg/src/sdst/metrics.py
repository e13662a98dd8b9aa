"""Soft-NMS post-processing and the MR / HD evaluation metrics.

Everything here is exact arithmetic on plain Python floats; each operation
is pinned to an independently written brute-force oracle in the test suite.
Ties always break toward the lower original index so reports are
deterministic.
"""

import json
import math
from typing import NamedTuple


class ScoredMoment(NamedTuple):
    start: float
    end: float
    score: float


MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
R1_THRESHOLDS = (0.5, 0.7)


def segment_iou(a, b) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0.0 else 0.0


def confidence(p: float, a: float) -> float:
    """Ranking confidence: sqrt(p * a)."""
    return math.sqrt(p * a)


def soft_nms(cands, sigma=0.5, min_score=1e-3, top_k=10):
    """Gaussian soft-NMS: decay overlapping scores instead of deleting.

    cands: iterable of ScoredMoment (or (start, end, score) triples).
    Returns the kept ScoredMoments in pick order (descending final score).
    """
    if sigma <= 0:
        raise ValueError("soft_nms sigma must be positive")
    live = [(ScoredMoment(*c).start, ScoredMoment(*c).end,
             float(ScoredMoment(*c).score), i) for i, c in enumerate(cands)]
    kept = []
    while live:
        best = max(range(len(live)), key=lambda i: (live[i][2], -live[i][3]))
        s, e, score, idx = live.pop(best)
        kept.append(ScoredMoment(s, e, score))
        survivors = []
        for os, oe, oscore, oidx in live:
            iou = segment_iou((s, e), (os, oe))
            decayed = oscore * math.exp(-(iou * iou) / sigma)
            if decayed >= min_score:
                survivors.append((os, oe, decayed, oidx))
        live = survivors
    return kept[:top_k]


def recall_at_1(ranked_preds, gts, thresholds=R1_THRESHOLDS):
    """Per threshold, the fraction of samples whose top-1 prediction reaches
    IoU >= threshold against any GT. Samples without GT are excluded.

    Returns (dict threshold -> fraction, n_excluded).
    """
    if len(ranked_preds) == 0:
        raise ValueError("recall_at_1 needs at least one sample")
    excluded = 0
    hits = {thr: 0 for thr in thresholds}
    counted = 0
    for preds, sample_gts in zip(ranked_preds, gts):
        if not sample_gts:
            excluded += 1
            continue
        counted += 1
        if not preds:
            continue
        top = preds[0]
        best = max(segment_iou((top[0], top[1]), g) for g in sample_gts)
        for thr in thresholds:
            if best >= thr:
                hits[thr] += 1
    fractions = {thr: (hits[thr] / counted if counted else 0.0)
                 for thr in thresholds}
    return fractions, excluded


def _sample_ap(scored, sample_gts, threshold) -> float:
    """All-point interpolated AP with greedy score-descending matching."""
    n_gt = len(sample_gts)
    if n_gt == 0:
        return 0.0
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].score, i))
    taken = [False] * n_gt
    flags = []
    for i in order:
        seg = (scored[i].start, scored[i].end)
        best_iou, best_j = -1.0, -1
        for j, g in enumerate(sample_gts):
            if taken[j]:
                continue
            v = segment_iou(seg, g)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= threshold:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    ap, tp, prev_recall = 0.0, 0, 0.0
    precs = []
    recs = []
    for k, flag in enumerate(flags, start=1):
        tp += flag
        precs.append(tp / k)
        recs.append(tp / n_gt)
    for k in range(len(flags)):
        if recs[k] > prev_recall:
            ap += (recs[k] - prev_recall) * max(precs[k:])
            prev_recall = recs[k]
    return ap


def mean_average_precision(scored_preds, gts, thresholds=MAP_THRESHOLDS):
    """Per-sample AP averaged over samples then thresholds.

    scored_preds: per sample, a list of ScoredMoment. Samples without GT are
    skipped. Returns (dict threshold -> AP, mean over thresholds).
    """
    if not any(gts):
        raise ValueError("mean_average_precision needs at least one GT")
    per_thr = {}
    for thr in thresholds:
        vals = [_sample_ap([ScoredMoment(*p) for p in preds], sample_gts, thr)
                for preds, sample_gts in zip(scored_preds, gts)
                if sample_gts]
        per_thr[thr] = sum(vals) / len(vals)
    mean = sum(per_thr.values()) / len(per_thr)
    return per_thr, mean


def highlight_metrics(saliency, positives):
    """(average precision, hit@1) of frame ranking against a binary mask.

    Returns (ap, hit, excluded_flag); a sample with no positive frames is
    flagged and contributes (0, 0, True).
    """
    n_pos = sum(1 for p in positives if p)
    if n_pos == 0:
        return 0.0, 0, True
    order = sorted(range(len(saliency)), key=lambda i: (-saliency[i], i))
    ap, tp = 0.0, 0
    for k, i in enumerate(order, start=1):
        if positives[i]:
            tp += 1
            ap += tp / k
    return ap / n_pos, 1 if positives[order[0]] else 0, False


def mean_iou(top1_preds, gts) -> float:
    """Mean over samples of the top-1 prediction's best IoU against GT."""
    vals = []
    for pred, sample_gts in zip(top1_preds, gts):
        if not sample_gts:
            continue
        if pred is None:
            vals.append(0.0)
        else:
            vals.append(max(segment_iou((pred[0], pred[1]), g)
                            for g in sample_gts))
    return sum(vals) / len(vals) if vals else 0.0


def write_reports(entries, txt_path, json_path):
    """entries: list of dicts {name, value, threshold}; threshold may be None."""
    lines = []
    for e in entries:
        key = e["name"] if e.get("threshold") is None else \
            f"{e['name']}@{e['threshold']}"
        lines.append(f"{key} = {e['value']:.6f}")
    with open(txt_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(json_path, "w") as fh:
        json.dump(entries, fh, indent=2)
