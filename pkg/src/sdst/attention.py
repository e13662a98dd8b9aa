"""Attention mechanisms: vanilla multi-head, deformable cross-attention,
and the reference-based deformable self-attention used by the sparse stream.

Deformable offsets are width-relative: a query with reference (c, w) samples
memory at normalized positions c + w * delta, converted to frame units only
inside the bilinear lookup. Both deformable variants share one aggregation
kernel, so with identical offsets and scores they produce identical outputs.
"""

import torch
from torch import nn

from .geometry import cw_to_moment
from .numerics import bilinear_sample_1d, softmax


def _batched(*tensors):
    """Add a batch dim to 2-d inputs; report whether it was added."""
    if tensors[0].dim() == 2:
        return [t.unsqueeze(0) for t in tensors], True
    return list(tensors), False


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with per-head channel slices."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError(f"heads {n_heads} must divide dim {dim}")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, query, key, value):
        if key.shape[-2] == 0:
            raise ValueError("empty-memory")
        (query, key, value), unbatch = _batched(query, key, value)
        b, n, _ = query.shape
        l = key.shape[1]
        h, dh = self.n_heads, self.head_dim
        q = self.q_proj(query).view(b, n, h, dh).transpose(1, 2)
        k = self.k_proj(key).view(b, l, h, dh).transpose(1, 2)
        v = self.v_proj(value).view(b, l, h, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / dh**0.5
        attn = softmax(logits, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, self.dim)
        out = self.out_proj(out)
        return out.squeeze(0) if unbatch else out


def deformable_aggregate(refs, values, offsets, scores, n_heads, out_proj):
    """Shared weighted-aggregation kernel of both deformable variants.

    refs (B, M, 2) in normalized units, values (B, T, F) projected memory,
    offsets/scores (B, M, H, P) with scores on the per-head simplex. Head h
    aggregates its channel slice from memory rows sampled at
    (c + w * offset) * (T - 1), border-clamped.
    """
    b, m, _ = refs.shape
    t, f = values.shape[1], values.shape[2]
    dh = f // n_heads
    center = refs[..., 0].unsqueeze(-1).unsqueeze(-1)
    width = refs[..., 1].unsqueeze(-1).unsqueeze(-1)
    pos = (center + width * offsets) * (t - 1)
    rows = bilinear_sample_1d(values, pos.reshape(b, -1))
    rows = rows.view(b, m, n_heads, offsets.shape[-1], f)
    per_head = [rows[:, :, h, :, h * dh:(h + 1) * dh] for h in range(n_heads)]
    rows = torch.stack(per_head, dim=2)
    agg = (scores.unsqueeze(-1) * rows).sum(dim=3)
    return out_proj(agg.reshape(b, m, f))


def _init_offset_heads(offset_head, score_head, n_heads, n_points,
                       offset_init):
    """Zero weights so step-0 samples sit exactly at the per-head biases."""
    nn.init.zeros_(offset_head.weight)
    bias = torch.tensor(offset_init, dtype=torch.float32)
    bias = bias.repeat_interleave(n_points)
    with torch.no_grad():
        offset_head.bias.copy_(bias)
    nn.init.zeros_(score_head.weight)
    nn.init.zeros_(score_head.bias)


class DeformableCrossAttention(nn.Module):
    """Deformable attention with offsets predicted from the queries only."""

    def __init__(self, dim: int, n_heads: int = 2, n_points: int = 4,
                 offset_init=(-1.0, 1.0)):
        super().__init__()
        if len(offset_init) != n_heads:
            raise ValueError("one offset-init bias per head required")
        if dim % n_heads != 0:
            raise ValueError(f"heads {n_heads} must divide dim {dim}")
        self.n_heads = n_heads
        self.n_points = n_points
        self.query_proj = nn.Linear(dim, dim)
        self.offset_head = nn.Linear(dim, n_heads * n_points)
        self.score_head = nn.Linear(dim, n_heads * n_points)
        self.value_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        for lin in (self.query_proj, self.value_proj, self.out_proj):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)
        _init_offset_heads(self.offset_head, self.score_head,
                           n_heads, n_points, offset_init)

    def predict(self, queries):
        """Offsets and simplex scores, (B, M, H, P) each."""
        b, m, _ = queries.shape
        q = self.query_proj(queries)
        offsets = self.offset_head(q).view(b, m, self.n_heads, self.n_points)
        scores = softmax(
            self.score_head(q).view(b, m, self.n_heads, self.n_points),
            dim=-1)
        return offsets, scores

    def forward(self, queries, refs, memory):
        if memory.shape[-2] == 0:
            raise ValueError("empty-sequence")
        (queries, refs, memory), unbatch = _batched(queries, refs, memory)
        offsets, scores = self.predict(queries)
        values = self.value_proj(memory)
        out = deformable_aggregate(refs, values, offsets, scores,
                                   self.n_heads, self.out_proj)
        if unbatch:
            return out.squeeze(0), offsets.squeeze(0), scores.squeeze(0)
        return out, offsets, scores


class ReferenceDeformableSelfAttention(nn.Module):
    """Deformable attention whose query path reads the memory itself.

    The memory first passes through a two-layer temporal convolution stack;
    each reference then gathers the left-boundary, center and right-boundary
    rows, concatenates them, and projects to a small latent from which the
    offset and score heads are predicted. Everything downstream of the
    prediction reuses the shared aggregation kernel.
    """

    def __init__(self, dim: int, n_heads: int = 2, n_points: int = 4,
                 latent_dim: int = 64, cnn_hidden: int = 256,
                 offset_init=(-1.0, 1.0)):
        super().__init__()
        if len(offset_init) != n_heads:
            raise ValueError("one offset-init bias per head required")
        if dim % n_heads != 0:
            raise ValueError(f"heads {n_heads} must divide dim {dim}")
        self.n_heads = n_heads
        self.n_points = n_points
        self.conv1 = nn.Conv1d(dim, cnn_hidden, 3, padding=1)
        self.conv_norm = nn.LayerNorm(cnn_hidden)
        self.conv2 = nn.Conv1d(cnn_hidden, dim, 3, padding=1)
        self.query_proj = nn.Linear(3 * dim, latent_dim)
        self.offset_head = nn.Linear(latent_dim, n_heads * n_points)
        self.score_head = nn.Linear(latent_dim, n_heads * n_points)
        self.value_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        for lin in (self.query_proj, self.value_proj, self.out_proj):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)
        _init_offset_heads(self.offset_head, self.score_head,
                           n_heads, n_points, offset_init)

    def context(self, memory):
        """(B, T, F) -> (B, T, F) local-context features."""
        x = self.conv1(memory.transpose(1, 2)).transpose(1, 2)
        x = torch.relu(self.conv_norm(x))
        return self.conv2(x.transpose(1, 2)).transpose(1, 2)

    def predict(self, refs, memory):
        """Offsets and scores from boundary-sampled context embeddings."""
        b, m, _ = refs.shape
        t = memory.shape[1]
        ctx = self.context(memory)
        bounds = cw_to_moment(refs)
        coords = torch.stack(
            [bounds[..., 0], refs[..., 0].clamp(0.0, 1.0), bounds[..., 1]],
            dim=-1) * (t - 1)
        sampled = bilinear_sample_1d(ctx, coords.reshape(b, -1))
        latent = self.query_proj(sampled.view(b, m, -1))
        offsets = self.offset_head(latent).view(b, m, self.n_heads,
                                                self.n_points)
        scores = softmax(
            self.score_head(latent).view(b, m, self.n_heads, self.n_points),
            dim=-1)
        return offsets, scores

    def forward(self, refs, memory):
        if memory.shape[-2] == 0:
            raise ValueError("empty-sequence")
        (refs, memory), unbatch = _batched(refs, memory)
        offsets, scores = self.predict(refs, memory)
        values = self.value_proj(memory)
        out = deformable_aggregate(refs, values, offsets, scores,
                                   self.n_heads, self.out_proj)
        if unbatch:
            return out.squeeze(0), offsets.squeeze(0), scores.squeeze(0)
        return out, offsets, scores


def weighted_offsets(offsets: torch.Tensor,
                     scores: torch.Tensor) -> torch.Tensor:
    """Score-weighted mean offset d_q per query and head: (..., H, P) -> (..., H)."""
    return (offsets * scores).sum(dim=-1)


def mean_weighted_offsets(offsets: torch.Tensor,
                          scores: torch.Tensor) -> torch.Tensor:
    """Per-head mean of d_q over queries (and batch when present): (H,)."""
    d = weighted_offsets(offsets, scores)
    return d.reshape(-1, d.shape[-1]).mean(dim=0)
