"""The K-level recurrent model composing both streams with shared weights.

One SDST layer (dense + sparse parameter blocks) is applied K times, once per
intermediate feature level; with sharing disabled the recurrence instead
walks K independent copies (the ablation toggle). Moment-retrieval heads run
on every level's queries, saliency and actionness only on the last level.
"""

from dataclasses import dataclass, field

import torch
from torch import nn

from .config import ModelConfig
from .geometry import cw_to_moment, inverse_sigmoid
from .numerics import bilinear_sample_1d
from .streams import DenseStream, SparseStream, update_references


def mlp_head(in_dim: int, hidden: int, out_dim: int, depth: int,
             zero_last: bool = False) -> nn.Module:
    """Depth-n MLP with ReLU; depth 1 is a bare linear layer."""
    layers = []
    cur = in_dim
    for _ in range(depth - 1):
        lin = nn.Linear(cur, hidden)
        nn.init.kaiming_uniform_(lin.weight, nonlinearity="relu")
        nn.init.zeros_(lin.bias)
        layers += [lin, nn.ReLU()]
        cur = hidden
    last = nn.Linear(cur, out_dim)
    if zero_last:
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
    else:
        nn.init.kaiming_uniform_(last.weight, nonlinearity="relu")
        nn.init.zeros_(last.bias)
    layers.append(last)
    return nn.Sequential(*layers)


class AttentionPool(nn.Module):
    """Learnable attention pooling of token rows into one summary row."""

    def __init__(self, dim: int):
        super().__init__()
        self.score = nn.Linear(dim, 1)

    def forward(self, tokens):
        # tokens (..., L, F) -> (..., F)
        w = torch.softmax(self.score(tokens).squeeze(-1), dim=-1)
        return (w.unsqueeze(-1) * tokens).sum(dim=-2)


class SdstLayer(nn.Module):
    """One shared refinement layer: a dense stream plus a sparse stream."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.dense = DenseStream(cfg.dim, cfg.video_dim, cfg.text_dim,
                                 cfg.n_heads, cfg.ffn_ratio, cfg.dropout,
                                 cfg.droppath)
        self.sparse = SparseStream(cfg.dim, cfg.n_heads, cfg.ffn_ratio,
                                   cfg.droppath, cfg.attention,
                                   cfg.total_def_heads(), cfg.def_points,
                                   cfg.offset_init(), cfg.latent_dim,
                                   cfg.cnn_hidden)


@dataclass
class SdstOutputs:
    """Everything a forward pass produces, per level where applicable."""

    saliency: torch.Tensor                 # (B, T) in [-1, 1]
    actionness: torch.Tensor               # (B, M) in (0, 1)
    cls_probs: list = field(default_factory=list)    # K x (B, M)
    moments: list = field(default_factory=list)      # K x (B, M, 2)
    refs: list = field(default_factory=list)         # K x (B, M, 2)
    offsets: list = field(default_factory=list)      # K x (B, M, H, P) | None
    offset_scores: list = field(default_factory=list)
    video_embeds: list = field(default_factory=list)  # K x (B, T, F)
    text_pools: list = field(default_factory=list)    # K x (B, F)
    dense_final: torch.Tensor | None = None           # (B, T, F)


class SdstModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        copies = 1 if cfg.share_layers else cfg.n_levels
        self.layers = nn.ModuleList(SdstLayer(cfg) for _ in range(copies))
        # per-level fusion gate beta, zero-initialized so level features
        # enter fully at step 0
        self.fuse_gates = nn.Parameter(torch.zeros(cfg.n_levels))
        self.cls_head = mlp_head(cfg.dim, cfg.dim, 1, depth=1)
        self.delta_head = mlp_head(cfg.dim, cfg.dim, 2, depth=3,
                                   zero_last=True)
        self.act_head = mlp_head(cfg.roi_size * cfg.dim, cfg.dim, 1, depth=3)
        self.text_pool = AttentionPool(cfg.dim)
        self.h0 = nn.Parameter(torch.randn(cfg.n_queries, cfg.dim) * 0.02)
        centers = (torch.arange(cfg.n_queries, dtype=torch.float32) + 0.5)
        centers = centers / cfg.n_queries
        widths = torch.full((cfg.n_queries,), 0.1)
        self.r0_logit = nn.Parameter(
            inverse_sigmoid(torch.stack([centers, widths], dim=-1)))

    def layer_at(self, level: int) -> SdstLayer:
        return self.layers[0 if self.cfg.share_layers else level]

    def initial_state(self, batch: int, frames: int, dtype, device):
        d = torch.zeros(batch, frames, self.cfg.dim, dtype=dtype,
                        device=device)
        h = self.h0.to(dtype).unsqueeze(0).expand(batch, -1, -1)
        r = torch.sigmoid(self.r0_logit.to(dtype)).unsqueeze(0).expand(
            batch, -1, -1)
        return d, h, r

    def forward(self, levels) -> SdstOutputs:
        """levels: K pairs (v_raw (B, T, F_v), t_raw (B, L, F_t)), shallowest first."""
        if len(levels) != self.cfg.n_levels:
            raise ValueError(
                f"expected {self.cfg.n_levels} level feature pairs, "
                f"got {len(levels)}")
        v0 = levels[0][0]
        batch, frames = v0.shape[0], v0.shape[1]
        d, h, r = self.initial_state(batch, frames, v0.dtype, v0.device)
        out = SdstOutputs(saliency=None, actionness=None)
        t_pool = None
        for idx, (v_raw, t_raw) in enumerate(levels):
            layer = self.layer_at(idx)
            v, t = layer.dense.project_inputs(v_raw, t_raw)
            d = layer.dense.fuse_video(d, v, self.fuse_gates[idx])
            d = layer.dense.refine(d, t[:, 1:])
            h = layer.sparse.inject_text(h, t)
            h, offsets, scores = layer.sparse.refine(h, r, d)
            r = update_references(h, r, self.delta_head)
            t_pool = self.text_pool(t)
            out.cls_probs.append(torch.sigmoid(
                self.cls_head(h).squeeze(-1)))
            out.moments.append(cw_to_moment(r))
            out.refs.append(r)
            out.offsets.append(offsets)
            out.offset_scores.append(scores)
            out.video_embeds.append(v)
            out.text_pools.append(t_pool)
        out.dense_final = d
        out.saliency = self.saliency_scores(d, t_pool_override=t_pool)
        out.actionness = self.actionness(d, out.moments[-1])
        return out

    def saliency_scores(self, dense, text=None, t_pool_override=None):
        """Cosine of each frame row against the pooled text summary."""
        t_pool = (self.text_pool(text) if t_pool_override is None
                  else t_pool_override)
        squeeze = False
        if dense.dim() == 2:
            dense, t_pool = dense.unsqueeze(0), t_pool.unsqueeze(0)
            squeeze = True
        num = (dense * t_pool.unsqueeze(1)).sum(dim=-1)
        denom = (dense.norm(dim=-1) * t_pool.norm(dim=-1, keepdim=True))
        scores = num / denom.clamp(min=1e-8)
        return scores.squeeze(0) if squeeze else scores

    def actionness(self, dense, moments):
        """Sample roi_size positions across each moment, score with the MLP."""
        squeeze = False
        if dense.dim() == 2:
            dense, moments = dense.unsqueeze(0), moments.unsqueeze(0)
            squeeze = True
        b, t, f = dense.shape
        m = moments.shape[1]
        lin = torch.linspace(0.0, 1.0, self.cfg.roi_size,
                             dtype=dense.dtype, device=dense.device)
        start = moments[..., 0].unsqueeze(-1)
        end = moments[..., 1].unsqueeze(-1)
        pos = (start + (end - start) * lin) * (t - 1)      # (B, M, R)
        rows = bilinear_sample_1d(dense, pos.reshape(b, -1))
        rows = rows.view(b, m, self.cfg.roi_size * f)
        a = torch.sigmoid(self.act_head(rows).squeeze(-1))
        return a.squeeze(0) if squeeze else a
