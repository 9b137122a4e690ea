"""Versioned binary checkpoints.

Layout: 8 magic bytes, little-endian uint32 format version, uint64 length of
a UTF-8 JSON metadata blob, the blob, then every tensor as raw little-endian
float64 in the order the metadata lists them.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .io import atomic_write_bytes

MAGIC = b"MBDETRCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def pack(meta: dict, tensors: dict[str, torch.Tensor]) -> bytes:
    names = list(tensors)
    meta = dict(meta, tensors=[{"name": n, "shape": list(tensors[n].shape)} for n in names])
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob]
    for n in names:
        parts.append(tensors[n].detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes())
    return b"".join(parts)


def unpack(data: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    if len(data) < 20:
        raise CheckpointError("checkpoint is truncated")
    version, n = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if 20 + n > len(data):
        raise CheckpointError("checkpoint is truncated")
    try:
        meta = json.loads(data[20:20 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc
    offset = 20 + n
    tensors = {}
    for entry in meta["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError("checkpoint is truncated")
        arr = np.frombuffer(data[offset:end], dtype="<f8").reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float64))
        offset = end
    if offset != len(data):
        raise CheckpointError("trailing bytes after the last tensor")
    return meta, tensors


def save(path, model: torch.nn.Module, meta: dict, optimizer: torch.optim.Optimizer | None = None) -> Path:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = dict(meta)
    if optimizer is not None:
        sd = optimizer.state_dict()
        meta["optimizer"] = {"param_groups": sd["param_groups"], "state_keys": {}}
        for idx, st in sd["state"].items():
            keys = []
            for k, v in st.items():
                tensors[f"optim.{idx}.{k}"] = torch.as_tensor(v, dtype=torch.float64)
                keys.append(k)
            meta["optimizer"]["state_keys"][str(idx)] = keys
    return atomic_write_bytes(path, pack(meta, tensors))


def load(path) -> tuple[dict, dict[str, torch.Tensor]]:
    return unpack(Path(path).read_bytes())


def restore_model(model: torch.nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    own = model.state_dict()
    got = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    if set(got) != set(own):
        missing = sorted(set(own) - set(got))
        extra = sorted(set(got) - set(own))
        raise CheckpointError(f"checkpoint does not fit the model (missing {missing[:3]}, extra {extra[:3]})")
    for k, v in own.items():
        if tuple(got[k].shape) != tuple(v.shape):
            raise CheckpointError(f"shape mismatch for {k}: {tuple(got[k].shape)} vs {tuple(v.shape)}")
    model.load_state_dict({k: got[k].to(own[k].dtype) for k in own})


def restore_optimizer(optimizer: torch.optim.Optimizer, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    info = meta.get("optimizer")
    if info is None:
        raise CheckpointError("checkpoint carries no optimizer state")
    state = {}
    for idx, keys in info["state_keys"].items():
        entry = {}
        for k in keys:
            t = tensors[f"optim.{idx}.{k}"]
            entry[k] = t.to(torch.float32) if k == "step" else t
        state[int(idx)] = entry
    optimizer.load_state_dict({"state": state, "param_groups": info["param_groups"]})
