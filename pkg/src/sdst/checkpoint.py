"""Flat checkpoint container: JSON manifest + raw 32-bit little-endian data.

Layout: 8-byte magic, u32 version, u64 manifest length, UTF-8 JSON manifest
(entry names, shapes, and the run config as YAML text), then each tensor's
float32 little-endian bytes in manifest order. Round trips are bit-exact.
"""

import json
import struct

import numpy as np
import torch

MAGIC = b"SDSTCKPT"
VERSION = 1


def save_checkpoint(path, model, config_yaml: str, extra: dict | None = None):
    entries = []
    blobs = []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    manifest = {"entries": entries, "config": config_yaml,
                "extra": extra or {}}
    payload = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns (state: dict name -> float32 ndarray, config_yaml, extra)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError("bad-magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError("unsupported-version")
        (n,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(n).decode("utf-8"))
        state = {}
        for entry in manifest["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise ValueError("truncated-checkpoint")
            state[entry["name"]] = np.frombuffer(
                raw, dtype="<f4").reshape(shape).copy()
    return state, manifest["config"], manifest.get("extra", {})


def restore_model(model, state: dict) -> None:
    tensors = {k: torch.from_numpy(v) for k, v in state.items()}
    model.load_state_dict(tensors)
