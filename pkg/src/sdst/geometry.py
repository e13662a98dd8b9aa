"""Temporal segments, center-width references and interval overlap.

Every model-internal coordinate lives in normalized video time [0, 1];
conversion to frame units (* (T-1)) happens only at sampling sites and in
metric reporting.
"""

import torch


def cw_to_moment(refs: torch.Tensor) -> torch.Tensor:
    """(..., 2) center-width rows -> (..., 2) clamped (start, end) rows."""
    center = refs[..., 0]
    half = refs[..., 1] / 2.0
    start = (center - half).clamp(0.0, 1.0)
    end = (center + half).clamp(0.0, 1.0)
    return torch.stack([start, end], dim=-1)


def moment_to_cw(moments: torch.Tensor) -> torch.Tensor:
    """(start, end) rows -> (center, width) rows; inverse for interior segments."""
    start = moments[..., 0]
    end = moments[..., 1]
    return torch.stack([(start + end) / 2.0, end - start], dim=-1)


def iou_1d(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of (..., 2) segment tensors; 0/0 is defined as 0.

    Differentiable where the overlap is positive, which is all the IoU loss
    needs; degenerate pairs contribute an exact zero.
    """
    inter = (torch.minimum(a[..., 1], b[..., 1])
             - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0.0)
    union = (a[..., 1] - a[..., 0]) + (b[..., 1] - b[..., 0]) - inter
    return inter / union.clamp(min=1e-8)


def iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """All-pairs IoU: a (M, 2) x b (G, 2) -> (M, G)."""
    return iou_1d(a.unsqueeze(1), b.unsqueeze(0))


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Logit of x with clamping, the update space for reference refinement."""
    x = x.clamp(eps, 1.0 - eps)
    return torch.log(x / (1.0 - x))
