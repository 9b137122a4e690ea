"""Atomic file writes and the raw-float32-plus-JSON-sidecar image format."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def write_raw(path, image: np.ndarray, **extra) -> Path:
    """Little-endian float32 pixels plus a JSON header next to them."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("raw images are 2-D")
    h, w = image.shape
    atomic_write_bytes(path, image.astype("<f4").tobytes())
    header = {"width": w, "height": h, "dtype": "float32", **extra}
    atomic_write_json(sidecar_path(path), header)
    return Path(path)


def read_raw(path) -> np.ndarray:
    header = json.loads(sidecar_path(path).read_text())
    if header.get("dtype") != "float32":
        raise ValueError(f"unsupported raw dtype {header.get('dtype')!r}")
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size != header["width"] * header["height"]:
        raise ValueError(f"{path}: size does not match header")
    return data.reshape(header["height"], header["width"]).astype(np.float64)
