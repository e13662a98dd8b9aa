"""Central finite-difference verification of every analytic gradient.

The numeric side never touches autograd: it re-evaluates the checked
function with coordinates nudged by +/- eps at float64. Parameters are
randomized away from their init values first; several of them initialize
exactly on clamp boundaries where one-sided derivatives legitimately differ.

Each coordinate is differenced at two step sizes and scored by the
better-agreeing one: the small step bounds truncation error on genuinely
small gradients, the large step suppresses float64 cancellation noise on
structurally zero gradients (e.g. key-projection biases, which softmax
shift-invariance removes exactly). A wrong analytic gradient disagrees with
both steps and is still caught.
"""

from dataclasses import dataclass

import torch

from .config import LossConfig, ModelConfig
from .losses import compute_losses
from .model import SdstModel, mlp_head
from .numerics import bilinear_sample_1d, droppath, layer_norm, softmax
from .attention import (DeformableCrossAttention, MultiHeadAttention,
                        ReferenceDeformableSelfAttention)
from .streams import DenseStream, SparseStream, update_references

MAX_CHECK_DIM = 32
MAX_CHECK_FRAMES = 16

SELECTORS = ("softmax", "layer_norm", "bilinear", "droppath", "mha",
             "deformable_ca", "rdsa", "dense_stream", "sparse_stream",
             "total_loss")


@dataclass
class CheckReport:
    name: str
    max_rel_err: float
    worst: str
    n_coords: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err < 1e-3


def _rel(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


FD_STEPS = (1e-6, 1e-3)


def _fd_check(name, fn, wrt: dict, coord_cap=0, seed=0):
    """Compare autograd against central differences for each named tensor."""
    for t in wrt.values():
        t.requires_grad_(True)
    scalar = fn()
    grads = torch.autograd.grad(scalar, list(wrt.values()),
                                allow_unused=True)
    sampler = torch.Generator().manual_seed(seed)
    worst = ("", -1.0)
    n_checked = 0
    with torch.no_grad():
        for (tname, tensor), grad in zip(wrt.items(), grads):
            flat = tensor.view(-1)
            numel = flat.numel()
            if coord_cap and numel > coord_cap:
                coords = torch.randperm(numel, generator=sampler)[:coord_cap]
            else:
                coords = torch.arange(numel)
            gflat = (grad.reshape(-1) if grad is not None
                     else torch.zeros(numel, dtype=tensor.dtype))
            for c in coords.tolist():
                orig = flat[c].item()
                err = None
                for eps in FD_STEPS:
                    flat[c] = orig + eps
                    f_plus = float(fn())
                    flat[c] = orig - eps
                    f_minus = float(fn())
                    flat[c] = orig
                    fd = (f_plus - f_minus) / (2.0 * eps)
                    e = _rel(float(gflat[c]), fd)
                    err = e if err is None else min(err, e)
                n_checked += 1
                if err > worst[1]:
                    worst = (f"{tname}[{c}]", err)
    for t in wrt.values():
        t.requires_grad_(False)
    return CheckReport(name=name, max_rel_err=worst[1], worst=worst[0],
                       n_coords=n_checked)


def _randomize(module, scale=0.05):
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn_like(p) * scale)


def _params(module, prefix):
    return {f"{prefix}.{n}": p for n, p in module.named_parameters()}


def _mix(out, weights):
    return (out * weights).sum()


def _interior_coords(n, t, gen):
    """Random frame coordinates away from clamp bounds and integer kinks."""
    base = torch.randint(0, t - 1, (n,), generator=gen).double()
    frac = 0.2 + 0.6 * torch.rand(n, generator=gen, dtype=torch.float64)
    return base + frac


def grad_check(selector="all", seed=0, dims=None):
    """Run the selected finite-difference checks; returns CheckReports.

    dims may override {"f", "t", "m", "k", "l"}; the checker refuses
    f > 32 or t > 16 to keep differencing cheap and well-conditioned.
    """
    d = {"f": 16, "t": 8, "m": 3, "k": 2, "l": 4,
         "f_v": 8, "f_t": 8}
    d.update(dims or {})
    if d["f"] > MAX_CHECK_DIM or d["t"] > MAX_CHECK_FRAMES:
        raise ValueError(
            f"grad-check refuses f > {MAX_CHECK_DIM} or t > "
            f"{MAX_CHECK_FRAMES}; got f={d['f']}, t={d['t']}")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 7)
    names = SELECTORS if selector == "all" else (selector,)
    reports = []
    for name in names:
        if name not in SELECTORS:
            raise ValueError(f"unknown grad-check selector: {name}")
        reports.append(_CHECKS[name](d, gen))
    return reports


def _check_softmax(d, gen):
    x = torch.randn(7, dtype=torch.float64)
    c = torch.randn(7, dtype=torch.float64)
    return _fd_check("softmax", lambda: _mix(softmax(x), c), {"x": x})


def _check_layer_norm(d, gen):
    x = torch.randn(5, d["f"], dtype=torch.float64)
    gain = 1.0 + 0.1 * torch.randn(d["f"], dtype=torch.float64)
    bias = 0.1 * torch.randn(d["f"], dtype=torch.float64)
    c = torch.randn(5, d["f"], dtype=torch.float64)
    return _fd_check(
        "layer_norm", lambda: _mix(layer_norm(x, gain, bias), c),
        {"x": x, "gain": gain, "bias": bias})


def _check_bilinear(d, gen):
    seq = torch.randn(d["t"], 3, dtype=torch.float64)
    coords = _interior_coords(5, d["t"], gen)
    c = torch.randn(5, 3, dtype=torch.float64)
    return _fd_check(
        "bilinear", lambda: _mix(bilinear_sample_1d(seq, coords), c),
        {"seq": seq, "coords": coords})


def _check_droppath(d, gen):
    x = torch.randn(4, 3, dtype=torch.float64)
    c = torch.randn(4, 3, dtype=torch.float64)
    return _fd_check(
        "droppath",
        lambda: _mix(droppath(x, 0.3, training=False), c), {"x": x})


def _check_mha(d, gen):
    attn = MultiHeadAttention(d["f"], 2).double()
    _randomize(attn)
    q = torch.randn(d["m"], d["f"], dtype=torch.float64)
    kv = torch.randn(d["l"], d["f"], dtype=torch.float64)
    c = 0.1 * torch.randn(d["m"], d["f"], dtype=torch.float64)
    wrt = {"q": q, "kv": kv}
    wrt.update(_params(attn, "mha"))
    return _fd_check("mha", lambda: _mix(attn(q, kv, kv), c), wrt,
                     coord_cap=48)


def _valid_refs(m, gen):
    c = 0.3 + 0.4 * torch.rand(m, generator=gen, dtype=torch.float64)
    w = 0.2 + 0.3 * torch.rand(m, generator=gen, dtype=torch.float64)
    return torch.stack([c, w], dim=-1)


def _check_deformable(d, gen):
    attn = DeformableCrossAttention(d["f"], 2, 4).double()
    _randomize(attn)
    h = torch.randn(d["m"], d["f"], dtype=torch.float64) * 0.5
    refs = _valid_refs(d["m"], gen)
    mem = torch.randn(d["t"], d["f"], dtype=torch.float64)
    c = torch.randn(d["m"], d["f"], dtype=torch.float64)
    wrt = {"h": h, "refs": refs, "memory": mem}
    wrt.update(_params(attn, "def_ca"))
    return _fd_check("deformable_ca",
                     lambda: _mix(attn(h, refs, mem)[0], c), wrt,
                     coord_cap=48)


def _check_rdsa(d, gen):
    attn = ReferenceDeformableSelfAttention(
        d["f"], 2, 4, latent_dim=16, cnn_hidden=16).double()
    _randomize(attn)
    refs = _valid_refs(d["m"], gen)
    mem = torch.randn(d["t"], d["f"], dtype=torch.float64)
    c = torch.randn(d["m"], d["f"], dtype=torch.float64)
    wrt = {"refs": refs, "memory": mem}
    wrt.update(_params(attn, "rdsa"))
    return _fd_check("rdsa", lambda: _mix(attn(refs, mem)[0], c), wrt,
                     coord_cap=48)


def _check_dense(d, gen):
    stream = DenseStream(d["f"], d["f_v"], d["f_t"], n_heads=2, ffn_ratio=2,
                         dropout=0.0, droppath_prob=0.0).double().eval()
    _randomize(stream)
    beta = torch.tensor(0.37, dtype=torch.float64)
    v_raw = torch.randn(d["t"], d["f_v"], dtype=torch.float64)
    t_raw = torch.randn(d["l"], d["f_t"], dtype=torch.float64)
    d0 = torch.randn(d["t"], d["f"], dtype=torch.float64)
    c = 0.1 * torch.randn(d["t"], d["f"], dtype=torch.float64)

    def fn():
        v, t = stream.project_inputs(v_raw, t_raw)
        fused = stream.fuse_video(d0, v, beta)
        return _mix(stream.refine(fused, t[1:]), c)

    wrt = {"v_raw": v_raw, "t_raw": t_raw, "d0": d0, "beta": beta}
    wrt.update(_params(stream, "dense"))
    return _fd_check("dense_stream", fn, wrt, coord_cap=32)


def _check_sparse(d, gen):
    stream = SparseStream(d["f"], n_heads=2, ffn_ratio=2, droppath_prob=0.0,
                          attention="rdsa", def_heads=2, def_points=4,
                          latent_dim=16, cnn_hidden=16).double().eval()
    _randomize(stream)
    delta_head = mlp_head(d["f"], d["f"], 2, depth=3,
                          zero_last=True).double()
    _randomize(delta_head)
    h = torch.randn(d["m"], d["f"], dtype=torch.float64) * 0.5
    r_raw = torch.randn(d["m"], 2, dtype=torch.float64) * 0.5
    text = torch.randn(d["l"], d["f"], dtype=torch.float64)
    mem = torch.randn(d["t"], d["f"], dtype=torch.float64)
    c1 = 0.1 * torch.randn(d["m"], d["f"], dtype=torch.float64)
    c2 = 0.1 * torch.randn(d["m"], 2, dtype=torch.float64)

    def fn():
        refs = torch.sigmoid(r_raw)
        h1 = stream.inject_text(h, text)
        h2, _, _ = stream.refine(h1, refs, mem)
        r2 = update_references(h2, refs, delta_head)
        return _mix(h2, c1) + _mix(r2, c2)

    wrt = {"h": h, "r_raw": r_raw, "text": text, "memory": mem}
    wrt.update(_params(stream, "sparse"))
    wrt.update(_params(delta_head, "delta_head"))
    return _fd_check("sparse_stream", fn, wrt, coord_cap=32)


def _check_total_loss(d, gen):
    cfg = ModelConfig(dim=d["f"], video_dim=d["f_v"], text_dim=d["f_t"],
                      n_levels=d["k"], n_queries=d["m"], n_heads=2,
                      ffn_ratio=2, dropout=0.0, droppath=0.0,
                      attention="rdsa", latent_dim=16, cnn_hidden=16,
                      roi_size=4)
    model = SdstModel(cfg).double().eval()
    _randomize(model)
    batch = 2
    levels = [(torch.randn(batch, d["t"], d["f_v"], dtype=torch.float64),
               torch.randn(batch, d["l"], d["f_t"], dtype=torch.float64))
              for _ in range(d["k"])]
    targets = []
    for s in range(batch):
        gts = torch.tensor([[0.2 + 0.3 * s, 0.5 + 0.3 * s]],
                           dtype=torch.float64)
        pos = torch.zeros(d["t"], dtype=torch.bool)
        lo = int(gts[0, 0] * (d["t"] - 1))
        hi = int(gts[0, 1] * (d["t"] - 1)) + 1
        pos[lo:hi] = True
        targets.append({"moments": gts, "saliency": pos})
    weights = LossConfig()

    def fn():
        return compute_losses(model(levels), targets, weights)[0]

    wrt = _params(model, "model")
    return _fd_check("total_loss", fn, wrt, coord_cap=32)


_CHECKS = {
    "softmax": _check_softmax,
    "layer_norm": _check_layer_norm,
    "bilinear": _check_bilinear,
    "droppath": _check_droppath,
    "mha": _check_mha,
    "deformable_ca": _check_deformable,
    "rdsa": _check_rdsa,
    "dense_stream": _check_dense,
    "sparse_stream": _check_sparse,
    "total_loss": _check_total_loss,
}
