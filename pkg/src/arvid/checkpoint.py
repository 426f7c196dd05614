"""Single-file checkpoint container.

Layout: 4-byte magic, u32 container version, u64 manifest length, UTF-8 JSON
manifest, then one raw little-endian float32 array per parameter. The
manifest records the model configuration, the training step, and
(name, shape, offset) per parameter; offsets are relative to the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError
from .model import CausalVideoModel, ModelConfig

MAGIC = b"AVCK"
VERSION = 1


def save_checkpoint(path: str | Path, model: CausalVideoModel, step: int = 0) -> None:
    params = []
    offset = 0
    blobs = []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4")
        params.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes

    manifest = {
        "container_version": VERSION,
        "config": _config_dict(model.config),
        "step": int(step),
        "params": params,
    }
    payload = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)


def _config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["latent_shape"] = list(d["latent_shape"])
    return d


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict, int]:
    """Read a container; returns (config, name->float32 tensor, step)."""
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16 or head[:4] != MAGIC:
            raise ContractError(f"not a checkpoint container: {path}")
        version, manifest_len = struct.unpack("<IQ", head[4:16])
        if version != VERSION:
            raise ContractError(f"unsupported container version {version}")
        manifest = json.loads(f.read(manifest_len).decode("utf-8"))
        payload = f.read()

    cfg_dict = dict(manifest["config"])
    cfg_dict["latent_shape"] = tuple(cfg_dict["latent_shape"])
    cfg = ModelConfig(**cfg_dict)

    tensors = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(payload):
            raise ContractError(
                f"truncated checkpoint payload for parameter {entry['name']!r}"
            )
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return cfg, tensors, int(manifest["step"])


def load_model(path: str | Path, dtype: torch.dtype = torch.float32
               ) -> tuple[CausalVideoModel, int]:
    cfg, tensors, step = load_checkpoint(path)
    model = CausalVideoModel(cfg).to(dtype)
    model.load_state_dict({k: v.to(dtype) for k, v in tensors.items()})
    return model, step
