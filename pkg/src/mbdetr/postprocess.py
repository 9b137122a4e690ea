"""From raw query outputs to frame-level detections, with patch-border deduplication."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import PatchLayout
from .io import atomic_write_text


@dataclass(frozen=True)
class Detection:
    centroid: tuple[float, float]
    box: tuple[float, float, float, float]  # x, y, w, h (top-left corner)
    score: float
    source_patch: int = 0

    def shifted(self, dx: float, dy: float) -> "Detection":
        x, y, w, h = self.box
        return Detection((self.centroid[0] + dx, self.centroid[1] + dy), (x + dx, y + dy, w, h),
                         self.score, self.source_patch)


def extract(probs, boxes, patch_size: tuple[int, int], threshold: float = 0.5, patch: int = 0) -> list[Detection]:
    """Queries whose bubble probability reaches ``threshold``, in patch pixels.

    ``probs [Nq, 2]`` and ``boxes [Nq, 4]`` (normalized cx, cy, w, h) may be
    tensors or arrays.
    """
    if not (0 < threshold < 1):
        raise ValueError("threshold must be in (0, 1)")
    p = np.asarray(probs.detach() if hasattr(probs, "detach") else probs, dtype=np.float64)
    b = np.asarray(boxes.detach() if hasattr(boxes, "detach") else boxes, dtype=np.float64)
    h, w = patch_size
    out = []
    for q in np.flatnonzero(p[:, 0] >= threshold):
        cx, cy, bw, bh = b[q] * [w, h, w, h]
        out.append(Detection((cx, cy), (cx - bw / 2, cy - bh / 2, bw, bh), float(p[q, 0]), patch))
    return out


def _shared_lines(p: int, q: int) -> tuple[bool, bool]:
    """(shares the vertical mid-line, shares the horizontal mid-line) for patches p, q."""
    col_p, row_p = p % 2, p // 2
    col_q, row_q = q % 2, q // 2
    return col_p != col_q, row_p != row_q


def is_border_duplicate(a: Detection, b: Detection, layout: PatchLayout, band: float, radius: float) -> bool:
    """Cross-patch pair, both within ``band`` of every boundary the two patches share, at most ``radius`` apart."""
    if a.source_patch == b.source_patch:
        return False
    vertical, horizontal = _shared_lines(a.source_patch, b.source_patch)
    mid_x, mid_y = layout.width / 2, layout.height / 2
    for d in (a, b):
        if vertical and abs(d.centroid[0] - mid_x) > band:
            return False
        if horizontal and abs(d.centroid[1] - mid_y) > band:
            return False
    return float(np.hypot(a.centroid[0] - b.centroid[0], a.centroid[1] - b.centroid[1])) <= radius


def to_frame_coordinates(per_patch: list[list[Detection]], layout: PatchLayout) -> list[Detection]:
    out = []
    for p, dets in enumerate(per_patch):
        ox, oy = layout.offsets[p]
        out.extend(Detection(d.centroid, d.box, d.score, p).shifted(ox, oy) for d in dets)
    return out


def merge_patches(per_patch: list[list[Detection]], layout: PatchLayout,
                  band: float = 4.0, radius: float = 3.0) -> list[Detection]:
    """Map patch detections to the frame and drop cross-border duplicates.

    Detections are visited by descending score (ties: lower patch index first);
    one is dropped when an already kept detection forms a border duplicate
    with it. Detections outside the border band are never dropped.
    """
    if band < 0 or radius <= 0:
        raise ValueError("need band >= 0 and radius > 0")
    frame_dets = to_frame_coordinates(per_patch, layout)
    order = sorted(range(len(frame_dets)), key=lambda i: (-frame_dets[i].score, frame_dets[i].source_patch, i))
    kept: list[Detection] = []
    for i in order:
        d = frame_dets[i]
        if not any(is_border_duplicate(k, d, layout, band, radius) for k in kept):
            kept.append(d)
    return kept


def write_detections(path, detections: dict[int, list[Detection]]) -> Path:
    """One JSON object per line: frame, x, y, w, h, cx, cy, score, patch."""
    lines = []
    for frame in sorted(detections):
        for d in detections[frame]:
            x, y, w, h = d.box
            lines.append(json.dumps({
                "frame": int(frame), "x": x, "y": y, "w": w, "h": h,
                "cx": d.centroid[0], "cy": d.centroid[1], "score": d.score, "patch": d.source_patch,
            }))
    return atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_detections(path) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        out.setdefault(r["frame"], []).append(
            Detection((r["cx"], r["cy"]), (r["x"], r["y"], r["w"], r["h"]), r["score"], r.get("patch", 0)))
    return out
