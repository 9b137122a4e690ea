"""Synthetic ULM frames: bubbles advected along vessels, imaged through a depth-varying PSF.

Coordinates are continuous pixels: pixel ``(row i, col j)`` covers
``[j, j+1) x [i, i+1)`` so its center is ``(j + 0.5, i + 0.5)`` and a frame
spans ``[0, W) x [0, H)``. Boxes are ``(x, y, w, h)`` with a top-left corner.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .io import atomic_write_bytes, atomic_write_json, read_raw, write_raw


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class PSFModel:
    """Anisotropic Gaussian whose widths grow linearly with depth (row)."""

    lateral_top: float = 1.0
    lateral_bottom: float = 1.5
    axial_top: float = 0.8
    axial_bottom: float = 1.2
    amplitude: float = 1.0

    def sigmas(self, depth, height: int):
        t = np.asarray(depth, dtype=np.float64) / float(height)
        lat = self.lateral_top + (self.lateral_bottom - self.lateral_top) * t
        ax = self.axial_top + (self.axial_bottom - self.axial_top) * t
        return lat, ax

    def validate(self, height: int) -> None:
        for a, b, name in ((self.lateral_top, self.lateral_bottom, "lateral"), (self.axial_top, self.axial_bottom, "axial")):
            # affine in depth, so positivity at both ends covers the whole frame
            if a <= 0 or b <= 0:
                raise ConfigurationError(f"{name} PSF sigma must stay positive over depth, got {a}..{b}")
        if self.amplitude <= 0:
            raise ConfigurationError("PSF amplitude must be positive")


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    n_vessels: int = 6
    radius_range: tuple[float, float] = (1.0, 3.0)
    speed_range: tuple[float, float] = (1.0, 3.0)
    control_points: int = 6
    bend: float = 0.15
    min_bubbles: int = 2
    max_bubbles: int = 20
    density: float = 11.0
    switch_rate: float = 0.3
    noise_sigma: float = 0.1
    psf: PSFModel = field(default_factory=PSFModel)

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError("frame size must be positive")
        rlo, rhi = self.radius_range
        slo, shi = self.speed_range
        if not (0 < rlo <= rhi):
            raise ConfigurationError(f"bad radius range {self.radius_range}")
        if not (0 < slo <= shi):
            raise ConfigurationError(f"bad speed range {self.speed_range}")
        if 2 * rhi + 1 >= min(self.width, self.height):
            raise ConfigurationError(f"vessel radius {rhi} cannot fit in a {self.width}x{self.height} frame")
        if self.n_vessels < 0:
            raise ConfigurationError("vessel count must be >= 0")
        if self.control_points < 2:
            raise ConfigurationError("vessels need at least 2 control points")
        if not (0 <= self.min_bubbles <= self.max_bubbles):
            raise ConfigurationError("need 0 <= min_bubbles <= max_bubbles")
        if self.n_vessels == 0 and self.max_bubbles > 0 and self.min_bubbles > 0:
            raise ConfigurationError("bubbles requested but no vessels to carry them")
        if not (self.min_bubbles <= self.density <= self.max_bubbles):
            raise ConfigurationError("density must lie within [min_bubbles, max_bubbles]")
        if not (0 < self.switch_rate <= 1):
            raise ConfigurationError("switch_rate must be in (0, 1]")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        self.psf.validate(self.height)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        psf = PSFModel(**d.pop("psf", {}))
        for key in ("radius_range", "speed_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(psf=psf, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["radius_range"] = list(self.radius_range)
        d["speed_range"] = list(self.speed_range)
        return d


@dataclass
class Vessel:
    points: np.ndarray  # [n, 2] (x, y)
    radius: float
    speed: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if len(self.points) < 2 or self.radius <= 0 or self.speed <= 0:
            raise ConfigurationError("vessel needs >= 2 points, positive radius and speed")
        seg = np.diff(self.points, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(self.seg_len <= 0):
            raise ConfigurationError("vessel has a zero-length segment")
        self.cum_len = np.concatenate([[0.0], np.cumsum(self.seg_len)])

    @property
    def length(self) -> float:
        return float(self.cum_len[-1])

    def locate(self, s: np.ndarray, offset: np.ndarray) -> np.ndarray:
        """Points at arc length ``s`` displaced ``offset`` along the local normal."""
        s = np.asarray(s, dtype=np.float64)
        k = np.clip(np.searchsorted(self.cum_len, s, side="right") - 1, 0, len(self.seg_len) - 1)
        t = (s - self.cum_len[k]) / self.seg_len[k]
        p0 = self.points[k]
        d = self.points[k + 1] - p0
        unit = d / self.seg_len[k][:, None]
        normal = np.stack([-unit[:, 1], unit[:, 0]], axis=1)
        return p0 + d * t[:, None] + normal * np.asarray(offset)[:, None]


@dataclass(frozen=True)
class MBAnnotation:
    centroid: tuple[float, float]
    box: tuple[float, float, float, float]
    id: int


@dataclass
class Frame:
    image: np.ndarray
    annotations: list[MBAnnotation]
    frame_index: int = 0

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def check(self) -> None:
        h, w = self.image.shape
        for a in self.annotations:
            cx, cy = a.centroid
            bx, by, bw, bh = a.box
            assert 0 <= cx < w and 0 <= cy < h, f"centroid {a.centroid} outside frame"
            assert bw > 0 and bh > 0, f"degenerate box {a.box}"
            assert bx <= cx <= bx + bw and by <= cy <= by + bh, f"box {a.box} misses centroid {a.centroid}"


@dataclass
class BubbleState:
    vessel: np.ndarray  # int index per bubble
    arc: np.ndarray
    offset: np.ndarray
    active: np.ndarray  # bool
    ids: np.ndarray

    def copy(self) -> "BubbleState":
        return BubbleState(*(a.copy() for a in (self.vessel, self.arc, self.offset, self.active, self.ids)))


def build_scene(spec: SceneSpec, rng: np.random.Generator) -> list[Vessel]:
    """Sample vessels that cross the field of view along gently bent paths.

    Control points are kept at least one radius away from the frame edge, so
    bubbles jittered transversely within the lumen never leave ``[0, W) x [0, H)``.
    """
    spec.validate()
    vessels = []
    for _ in range(spec.n_vessels):
        radius = float(rng.uniform(*spec.radius_range))
        speed = float(rng.uniform(*spec.speed_range))
        lo = radius + 0.5
        hi_x = spec.width - radius - 0.5
        hi_y = spec.height - radius - 0.5
        # enter on one side, leave on a different one
        side_a, side_b = rng.choice(4, size=2, replace=False)
        start = _edge_point(side_a, rng, lo, hi_x, hi_y)
        end = _edge_point(side_b, rng, lo, hi_x, hi_y)
        if np.hypot(*(end - start)) < 0.25 * min(spec.width, spec.height):
            end = np.array([spec.width, spec.height]) - start
            end = np.clip(end, [lo, lo], [hi_x, hi_y])
        t = np.linspace(0.0, 1.0, spec.control_points)
        d = end - start
        normal = np.array([-d[1], d[0]]) / max(np.hypot(*d), 1e-9)
        wiggle = rng.normal(0.0, spec.bend * min(spec.width, spec.height), size=spec.control_points)
        wiggle *= np.sin(np.pi * t)  # endpoints stay put
        pts = start + t[:, None] * d + wiggle[:, None] * normal
        pts[:, 0] = np.clip(pts[:, 0], lo, hi_x)
        pts[:, 1] = np.clip(pts[:, 1], lo, hi_y)
        keep = np.concatenate([[True], np.hypot(*np.diff(pts, axis=0).T) > 1e-6])
        pts = pts[keep]
        if len(pts) < 2:
            raise ConfigurationError("vessel collapsed to a point; frame too small for the radius")
        vessels.append(Vessel(pts, radius, speed))
    return vessels


def _edge_point(side: int, rng: np.random.Generator, lo: float, hi_x: float, hi_y: float) -> np.ndarray:
    if side == 0:
        return np.array([rng.uniform(lo, hi_x), lo])
    if side == 1:
        return np.array([hi_x, rng.uniform(lo, hi_y)])
    if side == 2:
        return np.array([rng.uniform(lo, hi_x), hi_y])
    return np.array([lo, rng.uniform(lo, hi_y)])


def init_bubbles(scene: list[Vessel], spec: SceneSpec, rng: np.random.Generator) -> BubbleState:
    """Spread ``max_bubbles`` slots over the vessels, proportionally to length."""
    n = spec.max_bubbles if scene else 0
    if n == 0:
        empty = np.zeros(0)
        return BubbleState(empty.astype(int), empty, empty, empty.astype(bool), empty.astype(int))
    lengths = np.array([v.length for v in scene])
    vessel = rng.choice(len(scene), size=n, p=lengths / lengths.sum())
    arc = np.array([rng.uniform(0, scene[k].length) for k in vessel])
    offset = np.array([rng.uniform(-scene[k].radius, scene[k].radius) for k in vessel])
    active = rng.random(n) < spec.density / spec.max_bubbles
    state = BubbleState(vessel.astype(int), arc, offset, active, np.arange(n))
    _enforce_minimum(state, spec.min_bubbles, rng)
    return state


def advance_bubbles(scene: list[Vessel], state: BubbleState, dt: float, rng: np.random.Generator) -> BubbleState:
    """Move every bubble ``speed * dt`` along its vessel; wrap exits back to the entry."""
    new = state.copy()
    if dt == 0 or len(new.arc) == 0:
        return new
    for i, k in enumerate(new.vessel):
        v = scene[k]
        s = new.arc[i] + v.speed * dt
        if s >= v.length:
            s = s % v.length
            new.offset[i] = rng.uniform(-v.radius, v.radius)
        new.arc[i] = s
    return new


def toggle_activity(state: BubbleState, spec: SceneSpec, rng: np.random.Generator) -> BubbleState:
    """Bubbles drift in and out of the imaging plane (two-state Markov chain per slot)."""
    new = state.copy()
    n = len(new.active)
    if n == 0:
        return new
    p_on = spec.density / spec.max_bubbles
    u = rng.random(n)
    turn_off = new.active & (u < spec.switch_rate * (1.0 - p_on))
    turn_on = ~new.active & (u < spec.switch_rate * p_on)
    new.active = (new.active & ~turn_off) | turn_on
    _enforce_minimum(new, spec.min_bubbles, rng)
    return new


def _enforce_minimum(state: BubbleState, minimum: int, rng: np.random.Generator) -> None:
    missing = minimum - int(state.active.sum())
    if missing > 0:
        idle = np.flatnonzero(~state.active)
        state.active[rng.choice(idle, size=missing, replace=False)] = True


def bubble_positions(scene: list[Vessel], state: BubbleState) -> np.ndarray:
    pos = np.zeros((len(state.arc), 2))
    for k, v in enumerate(scene):
        sel = state.vessel == k
        if sel.any():
            pos[sel] = v.locate(state.arc[sel], state.offset[sel])
    return pos


def render_bubbles(positions: np.ndarray, ids, shape: tuple[int, int], psf: PSFModel) -> tuple[np.ndarray, list[MBAnnotation]]:
    """Noise-free image and annotations for bubbles at ``positions`` ([n, 2] x, y)."""
    h, w = shape
    image = np.zeros((h, w))
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    anns = []
    for (cx, cy), bid in zip(np.asarray(positions, dtype=np.float64).reshape(-1, 2), ids):
        if not (0 <= cx < w and 0 <= cy < h):
            continue
        sx, sy = psf.sigmas(cy, h)
        gx = np.exp(-0.5 * ((xs - cx) / sx) ** 2)
        gy = np.exp(-0.5 * ((ys - cy) / sy) ** 2)
        image += psf.amplitude * np.outer(gy, gx)
        x0, x1 = max(0.0, cx - 3 * sx), min(float(w), cx + 3 * sx)
        y0, y1 = max(0.0, cy - 3 * sy), min(float(h), cy + 3 * sy)
        anns.append(MBAnnotation((float(cx), float(cy)), (x0, y0, x1 - x0, y1 - y0), int(bid)))
    return image, anns


def render_frame(
    scene: list[Vessel],
    state: BubbleState,
    spec: SceneSpec,
    rng: np.random.Generator,
    frame_index: int = 0,
    noise_sigma: float | None = None,
) -> Frame:
    sigma = spec.noise_sigma if noise_sigma is None else noise_sigma
    pos = bubble_positions(scene, state)[state.active]
    image, anns = render_bubbles(pos, state.ids[state.active], (spec.height, spec.width), spec.psf)
    if sigma > 0:
        image = np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, None)
    return Frame(image, anns, frame_index)


def simulate_sequence(spec: SceneSpec, n_frames: int, rng: np.random.Generator) -> list[Frame]:
    if n_frames < 1:
        raise ConfigurationError("n_frames must be >= 1")
    scene_rng, motion_rng, noise_rng = (np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(3))
    scene = build_scene(spec, scene_rng)
    state = init_bubbles(scene, spec, motion_rng)
    frame_rngs = [np.random.default_rng(s) for s in noise_rng.bit_generator.seed_seq.spawn(n_frames)]
    frames = []
    for t in range(n_frames):
        frames.append(render_frame(scene, state, spec, frame_rngs[t], frame_index=t))
        state = advance_bubbles(scene, state, 1.0, motion_rng)
        state = toggle_activity(state, spec, motion_rng)
    return frames


# -- on-disk layout ---------------------------------------------------------

GT_NAME = "ground_truth.json"


def frame_stem(index: int) -> str:
    return f"frame_{index:05d}"


def write_sequence(frames: list[Frame], out_dir, previews: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt = {"frames": []}
    for f in frames:
        stem = frame_stem(f.frame_index)
        write_raw(out / f"{stem}.raw", f.image, frame_index=f.frame_index)
        gt["frames"].append({
            "frame_index": f.frame_index,
            "file_name": f"{stem}.raw",
            "width": f.width,
            "height": f.height,
            "annotations": [
                {"id": a.id, "centroid": list(a.centroid), "box": list(a.box)} for a in f.annotations
            ],
        })
        if previews:
            atomic_write_bytes(out / f"{stem}.png", _preview_png(f.image))
    atomic_write_json(out / GT_NAME, gt)
    return out


def read_sequence(data_dir) -> list[Frame]:
    root = Path(data_dir)
    gt = json.loads((root / GT_NAME).read_text())
    frames = []
    for entry in gt["frames"]:
        image = read_raw(root / entry["file_name"])
        anns = [MBAnnotation(tuple(a["centroid"]), tuple(a["box"]), a["id"]) for a in entry["annotations"]]
        frames.append(Frame(image, anns, entry["frame_index"]))
    return frames


def _preview_png(image: np.ndarray) -> bytes:
    import io

    from PIL import Image

    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros_like(image) if hi <= lo else (image - lo) / (hi - lo)
    buf = io.BytesIO()
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def read_ground_truth(data_dir) -> dict[int, list[MBAnnotation]]:
    """Annotations keyed by frame index, without loading the images."""
    gt = json.loads((Path(data_dir) / GT_NAME).read_text())
    return {e["frame_index"]: [MBAnnotation(tuple(a["centroid"]), tuple(a["box"]), a["id"]) for a in e["annotations"]]
            for e in gt["frames"]}
