"""COCO export/import, correlation-clean train/test splits, 2x2 patching and augmentation."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import atomic_write_json
from .simulator import Frame, MBAnnotation, frame_stem

log = logging.getLogger(__name__)

CATEGORY = {"id": 1, "name": "microbubble"}


# -- COCO ------------------------------------------------------------------


@dataclass
class CocoDataset:
    images: list[dict] = field(default_factory=list)
    annotations: list[dict] = field(default_factory=list)
    categories: list[dict] = field(default_factory=lambda: [dict(CATEGORY)])

    def to_dict(self) -> dict:
        return {"images": self.images, "annotations": self.annotations, "categories": self.categories}

    @classmethod
    def from_dict(cls, d: dict) -> "CocoDataset":
        return cls(list(d["images"]), list(d["annotations"]), list(d["categories"]))

    def validate(self) -> None:
        image_ids = [im["id"] for im in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise ValueError("duplicate image ids")
        ann_ids = [a["id"] for a in self.annotations]
        if len(set(ann_ids)) != len(ann_ids):
            raise ValueError("duplicate annotation ids")
        sizes = {im["id"]: (im["width"], im["height"]) for im in self.images}
        category_ids = {c["id"] for c in self.categories}
        for a in self.annotations:
            if a["image_id"] not in sizes:
                raise ValueError(f"annotation {a['id']} references missing image {a['image_id']}")
            w_img, h_img = sizes[a["image_id"]]
            x, y, w, h = a["bbox"]
            if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > w_img or y + h > h_img:
                raise ValueError(f"annotation {a['id']} bbox {a['bbox']} outside image")
            if "area" in a and abs(a["area"] - w * h) > 1e-9 * max(1.0, w * h):
                raise ValueError(f"annotation {a['id']} area {a['area']} != w*h")
            if a.get("category_id") not in category_ids:
                raise ValueError(f"annotation {a['id']} has unknown category {a.get('category_id')}")

    def boxes_by_image(self) -> dict[int, list[list[float]]]:
        out: dict[int, list] = {im["id"]: [] for im in self.images}
        for a in self.annotations:
            out[a["image_id"]].append(list(a["bbox"]))
        return out


def to_coco(frames: list[Frame]) -> CocoDataset:
    coco = CocoDataset()
    ann_id = 1
    for image_id, f in enumerate(frames, start=1):
        coco.images.append({
            "id": image_id,
            "file_name": f"{frame_stem(f.frame_index)}.raw",
            "width": f.width,
            "height": f.height,
            "frame_index": f.frame_index,
        })
        for a in f.annotations:
            x, y, w, h = (float(v) for v in a.box)
            coco.annotations.append({
                "id": ann_id,
                "image_id": image_id,
                "category_id": CATEGORY["id"],
                "bbox": [x, y, w, h],
                "area": w * h,
                "iscrowd": 0,
                "centroid": [float(a.centroid[0]), float(a.centroid[1])],
                "bubble_id": int(a.id),
            })
            ann_id += 1
    return coco


def export_coco(frames: list[Frame], out_path) -> CocoDataset:
    coco = to_coco(frames)
    atomic_write_json(out_path, coco.to_dict())
    return coco


def import_coco(path) -> CocoDataset:
    return CocoDataset.from_dict(json.loads(Path(path).read_text()))


def annotations_from_coco(coco: CocoDataset) -> dict[int, list[MBAnnotation]]:
    """Annotations keyed by frame index."""
    frame_of = {im["id"]: im.get("frame_index", im["id"] - 1) for im in coco.images}
    out: dict[int, list[MBAnnotation]] = {fi: [] for fi in frame_of.values()}
    for a in coco.annotations:
        x, y, w, h = a["bbox"]
        c = a.get("centroid", [x + w / 2, y + h / 2])
        out[frame_of[a["image_id"]]].append(MBAnnotation(tuple(c), (x, y, w, h), a.get("bubble_id", a["id"])))
    return out


# -- correlation split -------------------------------------------------------


def frame_correlation(a: Frame | np.ndarray, b: Frame | np.ndarray) -> float:
    """Pearson correlation of the flattened intensities; 0 (with a warning) for a constant frame."""
    xa = np.asarray(getattr(a, "image", a), dtype=np.float64).ravel()
    xb = np.asarray(getattr(b, "image", b), dtype=np.float64).ravel()
    if xa.shape != xb.shape:
        raise ValueError("frames must have equal shapes")
    da = xa - xa.mean()
    db = xb - xb.mean()
    na = np.sqrt(np.dot(da, da))
    nb = np.sqrt(np.dot(db, db))
    if na == 0 or nb == 0:
        log.warning("constant frame in correlation; defined as 0")
        return 0.0
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


def correlation_matrix(frames) -> np.ndarray:
    x = np.stack([np.asarray(getattr(f, "image", f), dtype=np.float64).ravel() for f in frames])
    x = x - x.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(x, axis=1)
    flat = norms == 0
    if flat.any():
        log.warning("%d constant frame(s) in correlation matrix; their correlations are 0", int(flat.sum()))
    x[~flat] /= norms[~flat, None]
    c = np.clip(x @ x.T, -1.0, 1.0)
    np.fill_diagonal(c, np.where(flat, 0.0, 1.0))
    return c


@dataclass
class SplitManifest:
    train_ids: list[int]
    test_ids: list[int]
    threshold: float
    correlation_digest: str
    requested_test_size: int = 0

    @property
    def shortfall(self) -> int:
        return max(0, self.requested_test_size - len(self.test_ids))

    def to_dict(self) -> dict:
        return {
            "train_ids": self.train_ids,
            "test_ids": self.test_ids,
            "threshold": self.threshold,
            "correlation_digest": self.correlation_digest,
            "requested_test_size": self.requested_test_size,
            "shortfall": self.shortfall,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(list(d["train_ids"]), list(d["test_ids"]), float(d["threshold"]),
                   d["correlation_digest"], int(d.get("requested_test_size", len(d["test_ids"]))))

    def save(self, path) -> None:
        atomic_write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def split_by_correlation(frames: list[Frame], test_size: int, threshold: float = 0.18,
                         rng: np.random.Generator | None = None) -> SplitManifest:
    """Greedy pick of test frames whose correlation to every training frame stays below ``threshold``.

    Candidates are visited from the most isolated (lowest max correlation to
    any other frame) upward; a candidate is accepted when its max correlation to
    the frames not yet placed in the test set is below the threshold. The
    training set only shrinks as frames are accepted, so earlier acceptances stay valid.
    """
    n = len(frames)
    if not (0 <= test_size < n):
        raise ValueError(f"test_size must be in [0, {n}), got {test_size}")
    if not (0 < threshold <= 1):
        raise ValueError("threshold must be in (0, 1]")
    ids = [f.frame_index for f in frames]
    corr = correlation_matrix(frames)
    digest = hashlib.sha256(np.ascontiguousarray(corr).tobytes()).hexdigest()

    off = corr.copy()
    np.fill_diagonal(off, -np.inf)
    isolation = off.max(axis=1) if n > 1 else np.full(n, -np.inf)
    rng = rng if rng is not None else np.random.default_rng(0)
    perm = rng.permutation(n)
    order = perm[np.argsort(isolation[perm], kind="stable")]

    in_test = np.zeros(n, dtype=bool)
    for i in order:
        if in_test.sum() >= test_size:
            break
        train_mask = ~in_test
        train_mask[i] = False
        if not train_mask.any():
            break
        # margin keeps the independent per-pair recheck on the same side of the threshold
        if corr[i, train_mask].max() < threshold - 1e-9:
            in_test[i] = True

    test = sorted(ids[i] for i in np.flatnonzero(in_test))
    train = sorted(ids[i] for i in np.flatnonzero(~in_test))
    manifest = SplitManifest(train, test, float(threshold), digest, test_size)
    if manifest.shortfall:
        log.warning("only %d of %d requested test frames satisfy correlation < %.3f",
                    len(test), test_size, threshold)
    return manifest


def verify_split(frames: list[Frame], manifest: SplitManifest) -> float:
    """Recompute pairwise correlations from the raw frames; return the max test-to-train value.

    Raises ``AssertionError`` when the manifest is not a partition of the
    frames or the threshold is violated.
    """
    by_id = {f.frame_index: f for f in frames}
    train, test = set(manifest.train_ids), set(manifest.test_ids)
    assert not train & test, "train and test overlap"
    assert train | test == set(by_id), "split does not cover every frame"
    worst = -1.0
    for i in manifest.test_ids:
        for j in manifest.train_ids:
            worst = max(worst, frame_correlation(by_id[i], by_id[j]))
    if manifest.test_ids:
        assert worst < manifest.threshold, f"max test-train correlation {worst:.4f} >= {manifest.threshold}"
    return worst


# -- patches -----------------------------------------------------------------


@dataclass(frozen=True)
class PatchLayout:
    """2x2 tiling; patch order is top-left, top-right, bottom-left, bottom-right."""

    height: int
    width: int

    def __post_init__(self):
        if self.height % 2 or self.width % 2:
            raise ValueError(f"2x2 patching needs even frame sides, got {self.height}x{self.width}")

    @property
    def patch_size(self) -> tuple[int, int]:
        return self.height // 2, self.width // 2

    @property
    def offsets(self) -> list[tuple[int, int]]:
        ph, pw = self.patch_size
        return [(0, 0), (pw, 0), (0, ph), (pw, ph)]

    def to_frame(self, patch: int, x, y):
        ox, oy = self.offsets[patch]
        return x + ox, y + oy

    def to_patch(self, patch: int, x, y):
        ox, oy = self.offsets[patch]
        return x - ox, y - oy


def split_patches(frame: Frame, layout: PatchLayout | None = None) -> list[Frame]:
    """Cut a frame into four patch frames in patch coordinates.

    Annotations go to every patch their box overlaps with positive area; the box
    is clipped to the patch. If the true centroid is outside the patch, the
    clipped box's center stands in for it.
    """
    layout = layout or PatchLayout(frame.height, frame.width)
    if (frame.height, frame.width) != (layout.height, layout.width):
        raise ValueError("layout does not match frame size")
    ph, pw = layout.patch_size
    out = []
    for p, (ox, oy) in enumerate(layout.offsets):
        image = frame.image[oy:oy + ph, ox:ox + pw].copy()
        anns = []
        for a in frame.annotations:
            bx, by, bw, bh = a.box
            x0, x1 = max(bx, ox), min(bx + bw, ox + pw)
            y0, y1 = max(by, oy), min(by + bh, oy + ph)
            if x1 <= x0 or y1 <= y0:
                continue
            cx, cy = a.centroid
            if ox <= cx < ox + pw and oy <= cy < oy + ph:
                c = (cx - ox, cy - oy)
            else:
                c = ((x0 + x1) / 2 - ox, (y0 + y1) / 2 - oy)
            anns.append(MBAnnotation(c, (x0 - ox, y0 - oy, x1 - x0, y1 - y0), a.id))
        out.append(Frame(image, anns, frame.frame_index))
    return out


# -- augmentation ------------------------------------------------------------


def augment(frame: Frame, rng: np.random.Generator, scale_range=(0.8, 1.2)) -> Frame:
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(*scale_range))
    return apply_augmentation(frame, hflip, vflip, scale)


def apply_augmentation(frame: Frame, hflip: bool, vflip: bool, scale: float) -> Frame:
    """Flip and rescale about the frame center, keeping the frame size.

    Bubbles pushed out of the frame by the rescale lose their annotation.
    """
    h, w = frame.image.shape
    image = frame.image
    anns = list(frame.annotations)
    if scale != 1.0:
        image = _rescale_image(image, scale)
        anns = [_rescale_ann(a, scale, w, h) for a in anns]
        anns = [a for a in anns if a is not None]
    if hflip:
        image = image[:, ::-1]
        anns = [MBAnnotation((_mirror(a.centroid[0], w), a.centroid[1]),
                             (w - a.box[0] - a.box[2], a.box[1], a.box[2], a.box[3]), a.id) for a in anns]
    if vflip:
        image = image[::-1, :]
        anns = [MBAnnotation((a.centroid[0], _mirror(a.centroid[1], h)),
                             (a.box[0], h - a.box[1] - a.box[3], a.box[2], a.box[3]), a.id) for a in anns]
    return Frame(np.ascontiguousarray(image), anns, frame.frame_index)


def _mirror(c: float, size: int) -> float:
    m = size - c
    # a centroid sitting exactly on the low edge would land on the excluded high edge
    return m if m < size else float(np.nextafter(size, 0))


def _rescale_image(image: np.ndarray, scale: float) -> np.ndarray:
    h, w = image.shape
    # source position (in pixel-index units) of every output pixel center
    xs = (np.arange(w) + 0.5 - w / 2) / scale + w / 2 - 0.5
    ys = (np.arange(h) + 0.5 - h / 2) / scale + h / 2 - 0.5
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros_like(image)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        yi = y0 + dy
        vy = (yi >= 0) & (yi < h)
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi = x0 + dx
            vx = (xi >= 0) & (xi < w)
            vals = image[np.clip(yi, 0, h - 1)][:, np.clip(xi, 0, w - 1)]
            out += vals * np.outer(wy * vy, wx * vx)
    return out


def _rescale_ann(a: MBAnnotation, scale: float, w: int, h: int) -> MBAnnotation | None:
    cx = (a.centroid[0] - w / 2) * scale + w / 2
    cy = (a.centroid[1] - h / 2) * scale + h / 2
    if not (0 <= cx < w and 0 <= cy < h):
        return None
    bx, by, bw, bh = a.box
    x0 = max(0.0, (bx - w / 2) * scale + w / 2)
    y0 = max(0.0, (by - h / 2) * scale + h / 2)
    x1 = min(float(w), (bx + bw - w / 2) * scale + w / 2)
    y1 = min(float(h), (by + bh - h / 2) * scale + h / 2)
    return MBAnnotation((cx, cy), (x0, y0, x1 - x0, y1 - y0), a.id)
