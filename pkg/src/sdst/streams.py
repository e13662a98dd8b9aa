"""Dense (frame-level) and sparse (query-level) refinement streams.

Every sub-block is wrapped as x + droppath(norm(block(x))): the learnable
LayerNorm sits after the sub-block, inside the residual branch. Zeroing a
block's output projection therefore turns the whole block into an exact
identity, which reference updates and several invariants rely on.
"""

import torch
from torch import nn

from .attention import (DeformableCrossAttention, MultiHeadAttention,
                        ReferenceDeformableSelfAttention, _batched)
from .geometry import inverse_sigmoid
from .numerics import droppath, sinusoidal_positions

ATTENTION_VARIANTS = ("standard_ca", "deformable_ca", "rdsa")


class FeedForward(nn.Module):
    """Point-wise two-layer MLP with ReLU, Kaiming-initialized."""

    def __init__(self, dim: int, ratio: int = 4, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)
        self.dropout = nn.Dropout(dropout)
        nn.init.kaiming_uniform_(self.fc1.weight, nonlinearity="relu")
        nn.init.kaiming_uniform_(self.fc2.weight, nonlinearity="relu")
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(self.dropout(torch.relu(self.fc1(x))))


class DenseStream(nn.Module):
    """Per-level frame refinement: projection, gated fusion, CA/SA/FFN."""

    def __init__(self, dim, video_dim, text_dim, n_heads=8, ffn_ratio=4,
                 dropout=0.5, droppath_prob=0.25):
        super().__init__()
        self.dim = dim
        self.droppath_prob = droppath_prob
        self.video_proj = nn.Linear(video_dim, dim)
        self.text_proj = nn.Linear(text_dim, dim)
        self.embed_dropout = nn.Dropout(dropout)
        self.cross_attn = MultiHeadAttention(dim, n_heads)
        self.cross_norm = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads)
        self.self_norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio)
        self.ffn_norm = nn.LayerNorm(dim)

    def project_inputs(self, v_raw, t_raw):
        """Row-wise projection of both modalities into the shared width."""
        if v_raw.shape[-1] != self.video_proj.in_features:
            raise ValueError("video feature width mismatch")
        if t_raw.shape[-1] != self.text_proj.in_features:
            raise ValueError("text feature width mismatch")
        v = self.embed_dropout(self.video_proj(v_raw))
        t = self.embed_dropout(self.text_proj(t_raw))
        return v, t

    @staticmethod
    def fuse_video(d, v, beta_raw):
        """beta * D + (1 - beta) * V with beta clamped to [0, 1]."""
        beta = beta_raw.clamp(0.0, 1.0)
        return beta * d + (1.0 - beta) * v

    def _drop(self, x):
        return droppath(x, self.droppath_prob, self.training)

    def refine(self, d, text):
        """CA over text (CLS removed by the caller), SA over time, FFN."""
        if text.shape[-2] == 0:
            raise ValueError("empty-query")
        (d, text), unbatch = _batched(d, text)
        d = d + self._drop(self.cross_norm(self.cross_attn(d, text, text)))
        pe = sinusoidal_positions(d.shape[1], self.dim, d.dtype).to(d.device)
        qk = d + pe
        d = d + self._drop(self.self_norm(self.self_attn(qk, qk, d)))
        d = d + self._drop(self.ffn_norm(self.ffn(d)))
        return d.squeeze(0) if unbatch else d


class SparseStream(nn.Module):
    """Per-level refinement of the recurrent decoder queries.

    Module order is CA over text, SA across proposals, then the configured
    video-injection attention (rdsa / deformable_ca / standard_ca), then FFN.
    """

    def __init__(self, dim, n_heads=8, ffn_ratio=4, droppath_prob=0.25,
                 attention="rdsa", def_heads=2, def_points=4,
                 def_offset_init=(-1.0, 1.0), latent_dim=64, cnn_hidden=256):
        super().__init__()
        if attention not in ATTENTION_VARIANTS:
            raise ValueError(f"unknown attention variant: {attention}")
        self.dim = dim
        self.droppath_prob = droppath_prob
        self.attention = attention
        self.text_cross = MultiHeadAttention(dim, n_heads)
        self.text_norm = nn.LayerNorm(dim)
        self.query_self = MultiHeadAttention(dim, n_heads)
        self.query_norm = nn.LayerNorm(dim)
        if attention == "rdsa":
            self.video_attn = ReferenceDeformableSelfAttention(
                dim, def_heads, def_points, latent_dim, cnn_hidden,
                def_offset_init)
        elif attention == "deformable_ca":
            self.video_attn = DeformableCrossAttention(
                dim, def_heads, def_points, def_offset_init)
        else:
            self.video_attn = MultiHeadAttention(dim, n_heads)
        self.video_norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio)
        self.ffn_norm = nn.LayerNorm(dim)

    def _drop(self, x):
        return droppath(x, self.droppath_prob, self.training)

    def inject_text(self, h, text):
        """CA over the text tokens then SA across the moment proposals."""
        if text.shape[-2] == 0:
            raise ValueError("empty-query")
        (h, text), unbatch = _batched(h, text)
        h = h + self._drop(self.text_norm(self.text_cross(h, text, text)))
        h = h + self._drop(self.query_norm(self.query_self(h, h, h)))
        return h.squeeze(0) if unbatch else h

    def refine(self, h, refs, memory):
        """Video injection conditioned on the refined dense signal, then FFN.

        Returns (h', offsets, scores); offsets/scores are None for the
        standard_ca variant, which has no sampling instrumentation.
        """
        (h, refs, memory), unbatch = _batched(h, refs, memory)
        offsets = scores = None
        if self.attention == "rdsa":
            branch, offsets, scores = self.video_attn(refs, memory)
        elif self.attention == "deformable_ca":
            branch, offsets, scores = self.video_attn(h, refs, memory)
        else:
            pe = sinusoidal_positions(memory.shape[1], self.dim,
                                      memory.dtype).to(memory.device)
            branch = self.video_attn(h, memory + pe, memory)
        h = h + self._drop(self.video_norm(branch))
        h = h + self._drop(self.ffn_norm(self.ffn(h)))
        if unbatch:
            h = h.squeeze(0)
            if offsets is not None:
                offsets = offsets.squeeze(0)
                scores = scores.squeeze(0)
        return h, offsets, scores


def update_references(h, refs, delta_head):
    """Inverse-sigmoid-space reference update; identity under a zeroed head.

    The output is clamped a hair inside (0, 1): float32 sigmoid saturates to
    exactly 1.0 under extreme deltas, which would break reference validity.
    """
    delta = delta_head(h)
    out = torch.sigmoid(inverse_sigmoid(refs) + delta)
    return out.clamp(1e-6, 1.0 - 1e-6)
