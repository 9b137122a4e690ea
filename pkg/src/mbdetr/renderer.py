"""Super-resolution density maps built from Gaussian splats at localized centroids."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np
from PIL import Image

from .io import atomic_write_bytes, write_raw

# Splats are accumulated as integers in units of 2**-40 so that sums are
# exact and independent of order; a pixel can hold up to 2**23 units of mass.
_QUANTUM_BITS = 40
_SCALE = float(2 ** _QUANTUM_BITS)


@dataclass(frozen=True)
class RenderConfig:
    width: int = 128
    height: int = 128
    factor: int = 8
    sigma: float = 1.0
    truncate: float = 4.0


@dataclass
class SRMap:
    width: int
    height: int
    factor: int = 8
    sigma: float = 1.0
    truncate: float = 4.0
    frame_count: int = 0
    acc: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.factor < 1 or self.sigma <= 0:
            raise ValueError("need factor >= 1 and sigma > 0")
        if self.acc is None:
            self.acc = np.zeros((self.height * self.factor, self.width * self.factor), dtype=np.int64)

    @classmethod
    def from_config(cls, cfg: RenderConfig) -> "SRMap":
        return cls(cfg.width, cfg.height, cfg.factor, cfg.sigma, cfg.truncate)

    @property
    def grid(self) -> np.ndarray:
        return self.acc.astype(np.float64) / _SCALE

    @property
    def mass(self) -> float:
        return float(self.acc.sum()) / _SCALE

    def __add__(self, other: "SRMap") -> "SRMap":
        if (self.width, self.height, self.factor, self.sigma) != (other.width, other.height, other.factor, other.sigma):
            raise ValueError("maps have different geometry")
        return SRMap(self.width, self.height, self.factor, self.sigma, self.truncate,
                     self.frame_count + other.frame_count, self.acc + other.acc)


def _kernel_1d(center: float, sigma: float, truncate: float, size: int):
    """Unit-sum sampled Gaussian over pixel centers within ``truncate * sigma`` of ``center``.

    Returns the first pixel index and the weights, clipped to ``[0, size)``;
    clipping removes mass, normalization happens before it.
    """
    lo = math.ceil(center - truncate * sigma - 0.5)
    hi = math.floor(center + truncate * sigma - 0.5)
    idx = np.arange(lo, hi + 1)
    w = np.exp(-0.5 * ((idx + 0.5 - center) / sigma) ** 2)
    w /= w.sum()
    keep = (idx >= 0) & (idx < size)
    return (int(idx[keep][0]) if keep.any() else 0), w[keep]


def splat(sr: SRMap, centroid) -> SRMap:
    """Add a unit-mass isotropic Gaussian at ``centroid`` (frame pixels) in place."""
    x, y = float(centroid[0]), float(centroid[1])
    if not (0 <= x < sr.width and 0 <= y < sr.height):
        raise ValueError(f"centroid {centroid} outside the {sr.width}x{sr.height} frame")
    f = sr.factor
    x0, wx = _kernel_1d(x * f, sr.sigma, sr.truncate, sr.width * f)
    y0, wy = _kernel_1d(y * f, sr.sigma, sr.truncate, sr.height * f)
    if wx.size and wy.size:
        block = np.rint(np.outer(wy, wx) * _SCALE).astype(np.int64)
        sr.acc[y0:y0 + wy.size, x0:x0 + wx.size] += block
    return sr


def render_sequence(detections_per_frame, config: RenderConfig = RenderConfig()) -> SRMap:
    """Splat every centroid of every frame.

    ``detections_per_frame`` maps frame index -> items with a ``centroid``
    (detections or annotations), or is a list of such lists.
    """
    frames = detections_per_frame.values() if isinstance(detections_per_frame, dict) else detections_per_frame
    sr = SRMap.from_config(config)
    for dets in frames:
        for d in dets:
            splat(sr, getattr(d, "centroid", d))
        sr.frame_count += 1
    return sr


def to_rgb(grid: np.ndarray, colormap: str = "afmhot", gamma: float = 0.5) -> np.ndarray:
    """Max-normalize, gamma-compress and color an SR grid into ``uint8 [H, W, 3]``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    g = np.asarray(grid, dtype=np.float64)
    top = g.max() if g.size else 0.0
    if top <= 0:
        return np.zeros(g.shape + (3,), dtype=np.uint8)
    v = np.clip(g / top, 0.0, 1.0) ** gamma
    rgba = matplotlib.colormaps[colormap](v)
    return np.rint(rgba[..., :3] * 255).astype(np.uint8)


def export_image(sr, path, colormap: str = "afmhot", gamma: float = 0.5) -> Path:
    """Write an 8-bit PNG of an ``SRMap`` (or plain array)."""
    grid = sr.grid if isinstance(sr, SRMap) else sr
    buf = io.BytesIO()
    Image.fromarray(to_rgb(grid, colormap, gamma), mode="RGB").save(buf, format="PNG")
    return atomic_write_bytes(path, buf.getvalue())


def save_raw(sr: SRMap, path) -> Path:
    return write_raw(path, sr.grid, factor=sr.factor, sigma=sr.sigma, frame_count=sr.frame_count)
