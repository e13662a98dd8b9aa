"""Run configuration: nested dataclasses, YAML files, dotted overrides.

Defaults mirror the full-scale training recipe; the desk-scale presets under
configs/ override sizes and budgets.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


@dataclass
class ModelConfig:
    dim: int = 256
    video_dim: int = 768
    text_dim: int = 512
    n_levels: int = 4
    n_queries: int = 30
    n_heads: int = 8
    ffn_ratio: int = 4
    dropout: float = 0.5
    droppath: float = 0.25
    attention: str = "rdsa"          # standard_ca | deformable_ca | rdsa
    def_heads: int = 2
    def_points: int = 4
    center_head: bool = False        # adds a third, center-initialized head
    latent_dim: int = 64
    cnn_hidden: int = 256
    roi_size: int = 16
    share_layers: bool = True

    def offset_init(self) -> tuple:
        base = (-1.0, 1.0)
        return base + (0.0,) if self.center_head else base

    def total_def_heads(self) -> int:
        return self.def_heads + (1 if self.center_head else 0)


@dataclass
class LossConfig:
    l1: float = 1.0
    iou: float = 1.0
    saliency: float = 0.1
    align_video: float = 0.1
    align_layer: float = 0.1
    actionness: float = 1.0
    cls: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    temperature: float = 0.07


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 60
    max_steps: int = 0               # 0 means run the full epoch budget
    warmup_iters: int = 2000
    warmup_ratio: float = 0.001
    decay_every_epochs: int = 20
    decay_factor: float = 0.1
    clip_norm: float = 35.0


@dataclass
class DataConfig:
    train_dir: str = ""
    val_dir: str = ""
    pooling: str = "adaptive"        # cls | avg | adaptive


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out_dir: str = ""
    log_every: int = 50
    eval_every_epochs: int = 0       # 0 disables mid-run evaluation


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _build(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if dataclasses.is_dataclass(f.type) or f.name in (
                "model", "optim", "loss", "data"):
            sub = {"model": ModelConfig, "optim": OptimConfig,
                   "loss": LossConfig, "data": DataConfig}[f.name]
            kwargs[f.name] = _build(sub, value)
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    unknown = set(data) - {f.name for f in dataclasses.fields(RunConfig)}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return _build(RunConfig, data)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return from_dict(yaml.safe_load(fh) or {})


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ["model.dim=64", ...] style assignments; values parse as YAML."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value: {item!r}")
        key, _, raw = item.partition("=")
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if part not in node:
                raise ValueError(f"unknown config key: {key}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise ValueError(f"unknown config key: {key}")
        value = yaml.safe_load(raw)
        current = node[leaf]
        # coerce to the field's existing scalar type; YAML 1.1 leaves
        # floats like "5e-4" as strings
        if isinstance(current, bool):
            value = bool(value)
        elif isinstance(current, float) and not isinstance(value, float):
            value = float(value)
        elif isinstance(current, int) and isinstance(value, str):
            value = int(value)
        node[leaf] = value
    return from_dict(data)
