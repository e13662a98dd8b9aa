"""Hungarian matching and the full training objective.

Matching is recomputed independently at every refinement level (references
move between levels). The classification cost may be negative by design;
every loss component is non-negative.
"""

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .config import LossConfig
from .geometry import iou_1d, iou_matrix

log = logging.getLogger(__name__)


@dataclass
class MatchResult:
    pairs: list          # (query index, gt index), sorted by query index
    unmatched: list      # query indices without a gt


def matching_cost(p, moments, gts, weights: LossConfig):
    """DETR-style cost: -w_cls * p + w_l1 * L1 + w_iou * (1 - IoU)."""
    m, g = p.shape[0], gts.shape[0]
    if g > m:
        raise ValueError("too-many-targets")
    l1 = (moments.unsqueeze(1) - gts.unsqueeze(0)).abs().sum(dim=-1)
    iou = iou_matrix(moments, gts)
    return (-weights.cls * p.unsqueeze(1) + weights.l1 * l1
            + weights.iou * (1.0 - iou))


def hungarian_match(cost) -> MatchResult:
    """Minimum-cost one-to-one assignment of GT columns to query rows."""
    arr = cost.detach().cpu().numpy() if torch.is_tensor(cost) else cost
    rows, cols = linear_sum_assignment(arr)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched = {q for q, _ in pairs}
    unmatched = [q for q in range(arr.shape[0]) if q not in matched]
    return MatchResult(pairs=pairs, unmatched=unmatched)


def focal_loss(p, matched, alpha=0.25, gamma=2.0):
    """Binary focal terms averaged over all M queries."""
    p = p.clamp(1e-7, 1.0 - 1e-7)
    matched = matched.to(p.dtype)
    pos = -alpha * (1.0 - p) ** gamma * torch.log(p)
    neg = -(1.0 - alpha) * p ** gamma * torch.log(1.0 - p)
    return (matched * pos + (1.0 - matched) * neg).mean()


def mr_regression_losses(pred_moments, gt_moments):
    """(mean L1 over matches, 1 - mean IoU over matches)."""
    if pred_moments.shape[0] == 0:
        log.debug("regression losses with zero matches")
        zero = pred_moments.sum() * 0.0
        return zero, zero.clone()
    l1 = (pred_moments - gt_moments).abs().sum(dim=-1).mean()
    iou = 1.0 - iou_1d(pred_moments, gt_moments).mean()
    return l1, iou


def actionness_loss(a, moments, gts):
    """Mean absolute error of a against each query's best IoU with any GT."""
    best = iou_matrix(moments, gts).max(dim=-1).values
    return (a - best).abs().mean()


def saliency_infonce(scores, positives, temperature=0.07):
    """Ranking loss: each positive frame against all negative frames."""
    positives = positives.bool()
    n_pos = int(positives.sum())
    n_neg = int((~positives).sum())
    if n_pos == 0 or n_neg == 0:
        log.debug("saliency infonce skipped: %d pos / %d neg", n_pos, n_neg)
        return scores.sum() * 0.0
    s = scores / temperature
    neg = s[~positives]
    pos = s[positives]
    denom = torch.logsumexp(
        torch.cat([pos.unsqueeze(1), neg.unsqueeze(0).expand(n_pos, -1)],
                  dim=1), dim=1)
    return (denom - pos).mean()


def _cosine(a, b, eps=1e-8):
    return F.normalize(a, dim=-1, eps=eps), F.normalize(b, dim=-1, eps=eps)


def alignment_losses(video_embeds, text_pools, positives, temperature=0.07):
    """(video-level, layer-wise) contrastive terms.

    video_embeds: K tensors (B, T, F); text_pools: K tensors (B, F);
    positives: (B, T) bool. The video term contrasts each positive frame
    against the same-index frame of the other batch elements; the layer term
    contrasts it against the same frame at every other level. Degenerate
    setups (batch < 2, K < 2) contribute an exact zero.
    """
    k = len(video_embeds)
    b = video_embeds[0].shape[0]
    pos = positives.bool()
    zero = video_embeds[0].sum() * 0.0
    video_term = zero
    layer_term = zero.clone()
    if pos.sum() == 0:
        log.debug("alignment losses skipped: no positive frames")
        return video_term, layer_term
    if b >= 2:
        terms = []
        for lvl in range(k):
            v, t = _cosine(video_embeds[lvl], text_pools[lvl])
            sims = torch.einsum("bf,ctf->bct", t, v) / temperature
            logp = torch.log_softmax(sims, dim=1)
            own = logp[torch.arange(b), torch.arange(b)]      # (B, T)
            terms.append(-own[pos].mean())
        video_term = torch.stack(terms).mean()
    else:
        log.debug("video alignment skipped: batch < 2")
    if k >= 2:
        terms = []
        for lvl in range(k):
            v, t = _cosine(video_embeds[lvl], text_pools[lvl])
            own = (v * t.unsqueeze(1)).sum(dim=-1)            # (B, T)
            for other in range(k):
                if other == lvl:
                    continue
                v_o = F.normalize(video_embeds[other], dim=-1, eps=1e-8)
                cross = (v_o * t.unsqueeze(1)).sum(dim=-1)
                gap = (cross - own) / temperature
                terms.append(F.softplus(gap)[pos].mean())
        layer_term = torch.stack(terms).mean()
    else:
        log.debug("layer alignment skipped: single level")
    return video_term, layer_term


def total_loss(parts: dict, weights: LossConfig):
    """Weighted sum; per-level MR components are summed across levels."""
    total = (weights.saliency * parts["saliency"]
             + weights.actionness * parts["actionness"]
             + weights.align_video * parts["align_video"]
             + weights.align_layer * parts["align_layer"])
    for cls_l, l1_l, iou_l in zip(parts["cls"], parts["l1"], parts["iou"]):
        total = total + (weights.cls * cls_l + weights.l1 * l1_l
                         + weights.iou * iou_l)
    return total


def compute_losses(outputs, targets, weights: LossConfig):
    """Assemble every component from one forward pass.

    targets: per sample, dict with "moments" (G, 2) tensor and "saliency"
    (T,) bool tensor. Returns (total, parts) where parts maps component
    names to scalar tensors (per-level lists for the MR components).
    """
    k = len(outputs.cls_probs)
    batch = outputs.cls_probs[0].shape[0]
    dtype = outputs.cls_probs[0].dtype
    device = outputs.cls_probs[0].device
    zero = torch.zeros((), dtype=dtype, device=device)
    parts = {"cls": [], "l1": [], "iou": []}
    for lvl in range(k):
        cls_terms, l1_terms, iou_terms = [], [], []
        for s in range(batch):
            gts = targets[s]["moments"].to(dtype=dtype, device=device)
            if gts.shape[0] == 0:
                continue
            p = outputs.cls_probs[lvl][s]
            moments = outputs.moments[lvl][s]
            cost = matching_cost(p.detach(), moments.detach(), gts, weights)
            match = hungarian_match(cost)
            q_idx = torch.tensor([q for q, _ in match.pairs],
                                 device=device)
            g_idx = torch.tensor([g for _, g in match.pairs],
                                 device=device)
            mask = torch.zeros_like(p, dtype=torch.bool)
            mask[q_idx] = True
            cls_terms.append(focal_loss(p, mask, weights.focal_alpha,
                                        weights.focal_gamma))
            l1, iou = mr_regression_losses(moments[q_idx], gts[g_idx])
            l1_terms.append(l1)
            iou_terms.append(iou)
        parts["cls"].append(torch.stack(cls_terms).mean()
                            if cls_terms else zero.clone())
        parts["l1"].append(torch.stack(l1_terms).mean()
                           if l1_terms else zero.clone())
        parts["iou"].append(torch.stack(iou_terms).mean()
                            if iou_terms else zero.clone())
    act_terms = []
    sal_terms = []
    pos_masks = []
    for s in range(batch):
        gts = targets[s]["moments"].to(dtype=dtype, device=device)
        pos = targets[s]["saliency"].to(device=device).bool()
        pos_masks.append(pos)
        if gts.shape[0] > 0:
            act_terms.append(actionness_loss(
                outputs.actionness[s], outputs.moments[-1][s], gts))
        sal_terms.append(saliency_infonce(
            outputs.saliency[s], pos, weights.temperature))
    parts["actionness"] = (torch.stack(act_terms).mean()
                           if act_terms else zero.clone())
    parts["saliency"] = torch.stack(sal_terms).mean()
    video_term, layer_term = alignment_losses(
        outputs.video_embeds, outputs.text_pools,
        torch.stack(pos_masks), weights.temperature)
    parts["align_video"] = video_term
    parts["align_layer"] = layer_term
    return total_loss(parts, weights), parts
