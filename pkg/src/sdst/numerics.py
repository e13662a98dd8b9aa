"""Differentiable primitives shared by every model module.

All tensors are plain torch tensors; training runs in float32 and gradient
checks rebuild the same graph in float64. Randomness flows from the global
torch generator unless an explicit generator is passed, and a run is seeded
exactly once through :func:`seed_all`.
"""

import math

import numpy as np
import torch

LAYER_NORM_EPS = 1e-5


def seed_all(seed: int) -> torch.Generator:
    """Seed torch and numpy global state; returns a dedicated generator."""
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Shift-invariant softmax; rejects empty inputs."""
    if v.numel() == 0 or v.shape[dim] == 0:
        raise ValueError("empty-softmax")
    return torch.softmax(v, dim=dim)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor,
               eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    """Normalize the last dimension to zero mean / unit variance, then scale.

    Variance is the biased estimate over the feature dimension, matching the
    conventional transformer LayerNorm.
    """
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def bilinear_sample_1d(seq: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample rows of a (..., T, F) sequence at real frame coordinates.

    coords has shape (..., N) sharing the leading batch dims of seq (or both
    unbatched: seq (T, F), coords (N,)). Coordinates are clamped to
    [0, T-1]; the gradient w.r.t. a clamped coordinate is zero. Output is
    (..., N, F), row i = (1-w) * seq[floor(c)] + w * seq[ceil(c)].
    """
    t = seq.shape[-2]
    if t == 0:
        raise ValueError("empty-sequence")
    unbatched = seq.dim() == 2
    if unbatched:
        seq = seq.unsqueeze(0)
        coords = coords.unsqueeze(0)
    c = coords.clamp(0.0, float(t - 1))
    t0 = c.floor()
    w = (c - t0).unsqueeze(-1)
    i0 = t0.long().clamp(0, t - 1)
    i1 = (i0 + 1).clamp(max=t - 1)
    f = seq.shape[-1]
    gather0 = i0.unsqueeze(-1).expand(*i0.shape, f)
    gather1 = i1.unsqueeze(-1).expand(*i1.shape, f)
    lo = torch.gather(seq, -2, gather0)
    hi = torch.gather(seq, -2, gather1)
    out = (1.0 - w) * lo + w * hi
    return out.squeeze(0) if unbatched else out


def droppath(x: torch.Tensor, drop_prob: float, training: bool,
             generator: torch.Generator | None = None,
             batched: bool = True) -> torch.Tensor:
    """Stochastic depth on a residual branch.

    In eval mode (or drop_prob 0) this is the identity. In training the
    branch is zeroed per sample with probability drop_prob and scaled by
    1/(1-drop_prob) otherwise. With batched=True dim 0 indexes samples;
    otherwise the whole tensor is one sample.
    """
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError("droppath drop_prob must be in [0, 1)")
    if not training or drop_prob == 0.0:
        return x
    keep = 1.0 - drop_prob
    if batched:
        shape = (x.shape[0],) + (1,) * (x.dim() - 1)
    else:
        shape = (1,) * x.dim()
    mask = torch.rand(shape, dtype=x.dtype, device=x.device,
                      generator=generator) < keep
    return x * mask.to(x.dtype) / keep


def sinusoidal_positions(length: int, dim: int,
                         dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Standard sine/cosine position table of shape (length, dim)."""
    pe = torch.zeros(length, dim, dtype=dtype)
    pos = torch.arange(length, dtype=dtype).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=dtype)
                    * (-math.log(10000.0) / dim))
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: dim // 2])
    return pe
