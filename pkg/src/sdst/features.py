"""Feature containers, pooling strategies, and the synthetic data generator.

The generator stands in for the frozen backbone: every sample hides a
query-signature direction in one designated non-CLS token of the frames that
belong to its ground-truth moments, deeper levels carry the signature more
cleanly, and the frozen pooler is tilted toward that token. CLS pooling is
therefore informationally inferior by construction.
"""

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

MAGIC = b"SDSTFEAT"
VERSION = 1
POOLING_STRATEGIES = ("cls", "avg", "adaptive")


@dataclass
class RawLevelFeatures:
    """Per-sample backbone output: K video grids and K text grids."""

    video: np.ndarray    # (K, T, L_v, F_v) float32
    text: np.ndarray     # (K, L, F_t) float32


@dataclass
class Annotation:
    sample_id: str
    duration: float
    moments: list        # [[start, end], ...] in normalized [0, 1] time
    saliency: list       # length-T 0/1 list
    query_id: int


class FrozenPooler:
    """Fixed convex token weights shared by every level; never trained."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float32).copy()
        if w.ndim != 1 or w.size < 1:
            raise ValueError("pooler weights must be a non-empty vector")
        w.setflags(write=False)
        self.weights = w

    @classmethod
    def from_seed(cls, seed: int, n_tokens: int, favored_token: int,
                  tilt: float = 2.5):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, 0xF0071E])))
        logits = rng.normal(0.0, 0.5, n_tokens)
        logits[favored_token] += tilt
        logits -= logits.max()
        w = np.exp(logits)
        return cls(w / w.sum())

    def apply(self, raw):
        # (T, L_v, F) -> (T, F)
        return np.tensordot(raw, self.weights, axes=([1], [0]))

    def digest(self) -> str:
        return hashlib.sha256(self.weights.tobytes()).hexdigest()


def pool_level(raw, strategy: str, pooler: FrozenPooler | None = None):
    """Collapse the token dimension of one level: (T, L_v, F) -> (T, F)."""
    if raw.shape[1] < 1:
        raise ValueError("pool_level needs at least one token")
    if strategy == "cls":
        return np.ascontiguousarray(raw[:, 0, :])
    if strategy == "avg":
        return raw.mean(axis=1)
    if strategy == "adaptive":
        if pooler is None:
            raise ValueError("adaptive pooling requires a FrozenPooler")
        return pooler.apply(raw)
    raise ValueError(f"unknown pooling strategy: {strategy}")


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def write_features(path, features: RawLevelFeatures) -> None:
    video = np.ascontiguousarray(features.video, dtype="<f4")
    text = np.ascontiguousarray(features.text, dtype="<f4")
    k, t, l_v, f_v = video.shape
    k2, l, f_t = text.shape
    if k2 != k:
        raise ValueError("video and text level counts differ")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<7I", VERSION, k, t, l_v, f_v, l, f_t))
        fh.write(video.tobytes())
        fh.write(text.tobytes())


def read_features(path) -> RawLevelFeatures:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError("bad-magic")
        header = fh.read(28)
        if len(header) != 28:
            raise ValueError("truncated-header")
        version, k, t, l_v, f_v, l, f_t = struct.unpack("<7I", header)
        if version != VERSION:
            raise ValueError("unsupported-version")
        n_video = k * t * l_v * f_v
        n_text = k * l * f_t
        raw = fh.read(4 * (n_video + n_text))
        if len(raw) != 4 * (n_video + n_text):
            raise ValueError("truncated-payload")
    video = np.frombuffer(raw[:4 * n_video], dtype="<f4").reshape(
        k, t, l_v, f_v).copy()
    text = np.frombuffer(raw[4 * n_video:], dtype="<f4").reshape(
        k, l, f_t).copy()
    return RawLevelFeatures(video=video, text=text)


def write_annotations(path, annotations) -> None:
    with open(path, "w") as fh:
        for ann in annotations:
            fh.write(json.dumps(dataclasses.asdict(ann)) + "\n")


def read_annotations(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Annotation(**json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    num_samples: int = 32
    t: int = 32              # frames
    l_v: int = 4             # spatio-temporal tokens per frame
    f_v: int = 64            # raw video channels
    f_t: int = 32            # raw text channels
    l_text: int = 6          # text tokens (token 0 is CLS)
    k: int = 4               # feature levels
    max_moments: int = 3
    min_len_frames: int = 3
    noise_sigma: float = 0.25
    signal_token: int = 1    # designated non-CLS carrier token


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _draw_moments(rng, cfg: SynthConfig):
    """1..max_moments disjoint frame-grid segments, 2+ frames apart.

    Lengths are drawn first, then the leftover frames are split randomly
    into gaps, so any feasible draw packs on the first pass; infeasible
    length draws are retried a bounded number of times.
    """
    t_max = cfg.t - 1
    n = int(rng.integers(1, cfg.max_moments + 1))
    max_len = max(cfg.min_len_frames, cfg.t // 3)
    for _ in range(200):
        lengths = rng.integers(cfg.min_len_frames, max_len + 1, size=n)
        needed = int(lengths.sum()) + n + 2 * (n - 1)
        slack = cfg.t - needed
        if slack < 0:
            continue
        gaps = rng.multinomial(slack, [1.0 / (n + 1)] * (n + 1))
        spans = []
        cursor = 0
        for i in range(n):
            start = cursor + int(gaps[i])
            end = start + int(lengths[i])
            spans.append((start, end))
            cursor = end + 2
        return [[s / t_max, e / t_max] for s, e in spans]
    raise RuntimeError("moment-packing-failed: could not place "
                       f"{n} disjoint moments in {cfg.t} frames")


def synth_generate(cfg: SynthConfig, seed: int, out_dir) -> None:
    """Write a deterministic synthetic dataset to out_dir."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(cfg.num_samples + 1)
    shared = np.random.Generator(np.random.PCG64(children[0]))

    pooler_logits = shared.normal(0.0, 0.5, cfg.l_v)
    pooler_logits[cfg.signal_token] += 2.5
    pooler_w = np.exp(pooler_logits - pooler_logits.max())
    pooler_w /= pooler_w.sum()

    vt_map = shared.normal(0.0, 1.0 / np.sqrt(cfg.f_t),
                           (cfg.f_v, cfg.f_t))
    # deeper levels carry the canonical (text-predictable) direction more
    # cleanly and more strongly
    denom = max(cfg.k - 1, 1)
    strengths = [1.0 + 0.6 * lvl / denom for lvl in range(cfg.k)]
    video_mix = [0.5 * (1.0 - lvl / denom) for lvl in range(cfg.k)]
    text_noise = [0.4 * (1.0 - lvl / denom) for lvl in range(cfg.k)]
    mixers = [shared.normal(0.0, 1.0 / np.sqrt(cfg.f_v),
                            (cfg.f_v, cfg.f_v)) for _ in range(cfg.k)]

    annotations = []
    for i in range(cfg.num_samples):
        rng = np.random.Generator(np.random.PCG64(children[i + 1]))
        sig = _unit(rng.normal(0.0, 1.0, cfg.f_t))
        distractor = _unit(rng.normal(0.0, 1.0, cfg.f_t))
        gist = _unit(rng.normal(0.0, 1.0, cfg.f_v))
        moments = _draw_moments(rng, cfg)
        t_max = cfg.t - 1
        positives = [int(any(m[0] <= t / t_max <= m[1] for m in moments))
                     for t in range(cfg.t)]

        video = rng.normal(0.0, cfg.noise_sigma,
                           (cfg.k, cfg.t, cfg.l_v, cfg.f_v))
        v_sig = _unit(vt_map @ sig)
        v_dis = _unit(vt_map @ distractor)
        for lvl in range(cfg.k):
            mix = video_mix[lvl]
            carrier_pos = _unit((1.0 - mix) * v_sig + mix * (mixers[lvl] @ v_sig))
            carrier_neg = _unit((1.0 - mix) * v_dis + mix * (mixers[lvl] @ v_dis))
            video[lvl, :, 0, :] += 0.8 * gist
            for t in range(cfg.t):
                carrier = carrier_pos if positives[t] else carrier_neg
                video[lvl, t, cfg.signal_token, :] += strengths[lvl] * carrier

        text = rng.normal(0.0, cfg.noise_sigma, (cfg.k, cfg.l_text, cfg.f_t))
        for lvl in range(cfg.k):
            text[lvl, 0, :] += sig
            for j in range(1, cfg.l_text):
                jitter = _unit(rng.normal(0.0, 1.0, cfg.f_t))
                token = _unit((1.0 - text_noise[lvl]) * sig
                              + text_noise[lvl] * jitter)
                text[lvl, j, :] += token

        sample_id = f"s{i:05d}"
        write_features(out / "features" / f"{sample_id}.feat",
                       RawLevelFeatures(video=video.astype(np.float32),
                                        text=text.astype(np.float32)))
        annotations.append(Annotation(
            sample_id=sample_id, duration=float(cfg.t), moments=moments,
            saliency=positives, query_id=i))

    write_annotations(out / "annotations.jsonl", annotations)
    meta = {"generator": dataclasses.asdict(cfg), "seed": int(seed),
            "pooler_weights": [float(w) for w in pooler_w],
            "signal_token": cfg.signal_token, "version": VERSION}
    (out / "meta.yaml").write_text(yaml.safe_dump(meta, sort_keys=True))


class FeatureDataset:
    """Eagerly loaded synthetic dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        meta = yaml.safe_load((self.root / "meta.yaml").read_text())
        self.meta = meta
        self.pooler = FrozenPooler(meta["pooler_weights"])
        self.annotations = read_annotations(self.root / "annotations.jsonl")
        self.features = [read_features(self.root / "features"
                                       / f"{a.sample_id}.feat")
                         for a in self.annotations]
        if not self.features:
            raise ValueError("empty-dataset")

    def __len__(self):
        return len(self.annotations)

    @property
    def shape(self):
        f = self.features[0]
        return {"k": f.video.shape[0], "t": f.video.shape[1],
                "l_v": f.video.shape[2], "f_v": f.video.shape[3],
                "l": f.text.shape[1], "f_t": f.text.shape[2]}

    def pooled(self, strategy: str):
        """(N, K, T, F_v) pooled video and (N, K, L, F_t) text arrays."""
        video = np.stack([
            np.stack([pool_level(feat.video[lvl], strategy, self.pooler)
                      for lvl in range(feat.video.shape[0])])
            for feat in self.features]).astype(np.float32)
        text = np.stack([feat.text for feat in self.features])
        return video, text.astype(np.float32)
