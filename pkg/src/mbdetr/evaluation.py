"""COCO-style mAP/mAR for single-class bubble detection, plus centroid localization scores."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .io import atomic_write_json, atomic_write_text

log = logging.getLogger(__name__)

# Correctly rounded decimal grids. linspace would give 0.30000000000000004
# for the 0.30 recall point, which then misses a recall of exactly 3/10.
IOU_THRESHOLDS = np.arange(50, 100, 5) / 100
RECALL_POINTS = np.arange(101) / 100


@dataclass(frozen=True)
class EvalConfig:
    max_detections: int = 100
    distance_tolerance: float = 1.0


@dataclass
class EvalReport:
    mAP: float
    mAR: float
    ap50: float
    ap75: float
    localization_precision: float
    localization_recall: float
    distance_tolerance: float
    n_frames: int
    n_detections: int
    n_ground_truth: int
    ap_per_iou: list[float] = field(default_factory=list)
    ar_per_iou: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [
            ("mAP (IoU .50:.05:.95)", self.mAP),
            ("mAR (IoU .50:.05:.95, 100 dets)", self.mAR),
            ("AP @ IoU .50", self.ap50),
            ("AP @ IoU .75", self.ap75),
            (f"localization precision (extension, tol {self.distance_tolerance:g} px)", self.localization_precision),
            (f"localization recall (extension, tol {self.distance_tolerance:g} px)", self.localization_recall),
        ]
        width = max(len(r[0]) for r in rows)
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  ------"]
        lines += [f"{name:<{width}}  {value:6.4f}" for name, value in rows]
        lines.append(f"{'frames / detections / ground truth':<{width}}  "
                     f"{self.n_frames} / {self.n_detections} / {self.n_ground_truth}")
        return "\n".join(lines) + "\n"

    def save(self, json_path, table_path=None) -> None:
        atomic_write_json(json_path, _nan_to_none(self.to_dict()))
        if table_path is not None:
            atomic_write_text(table_path, self.table())


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def box_iou(a, b) -> np.ndarray:
    """Pairwise IoU of ``a [N, 4]`` and ``b [M, 4]`` boxes given as (x, y, w, h)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx1, by1 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(np.minimum(ax1[:, None], bx1[None]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(ay1[:, None], by1[None]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def match_greedy(similarity: np.ndarray, threshold: float, higher_is_better: bool = True):
    """Match score-ordered detections (rows) to ground truths (columns).

    Each detection takes the best unmatched ground truth whose similarity
    passes ``threshold`` (``>=`` for IoU, ``<=`` for distances). Returns the
    TP flags per detection and the index of the matched ground truth (-1 if none).
    """
    n_det, n_gt = similarity.shape
    taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(n_det, dtype=bool)
    matched = np.full(n_det, -1)
    for d in range(n_det):
        best, best_val = -1, None
        for g in range(n_gt):
            if taken[g]:
                continue
            s = similarity[d, g]
            ok = s >= threshold if higher_is_better else s <= threshold
            if not ok:
                continue
            if best_val is None or (s > best_val if higher_is_better else s < best_val):
                best, best_val = g, s
        if best >= 0:
            taken[best] = True
            tp[d] = True
            matched[d] = best
    return tp, matched


def average_precision(scores, tp, n_gt: int) -> float:
    """Area under the 101-point interpolated precision/recall curve."""
    if n_gt == 0:
        log.warning("average precision undefined without ground truth")
        return float("nan")
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order]
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def _sorted_dets(dets, limit: int | None):
    # full key so that ties never depend on input order
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, tuple(dets[i].centroid), tuple(dets[i].box)))
    if limit is not None:
        order = order[:limit]
    return [dets[i] for i in order]


def evaluate(detections: dict, ground_truth: dict, config: EvalConfig = EvalConfig()) -> EvalReport:
    """Score per-frame detections against per-frame annotations.

    Both arguments map frame index -> list; detections need ``score``, ``box``
    and ``centroid``; annotations need ``box`` and ``centroid``. Frames are
    taken from ``ground_truth``.
    """
    frames = sorted(ground_truth)
    if not frames:
        raise ValueError("nothing to evaluate: no ground-truth frames")
    n_gt = sum(len(ground_truth[f]) for f in frames)
    scores, n_det = [], 0
    tps = [[] for _ in IOU_THRESHOLDS]
    loc_tp = 0
    loc_det = 0
    for f in frames:
        gts = ground_truth[f]
        all_dets = _sorted_dets(detections.get(f, []), None)
        dets = all_dets[:config.max_detections]
        n_det += len(all_dets)
        gt_boxes = [g.box for g in gts]
        ious = box_iou([d.box for d in dets], gt_boxes) if dets and gts else np.zeros((len(dets), len(gts)))
        scores.extend(d.score for d in dets)
        for t, thr in enumerate(IOU_THRESHOLDS):
            flags, _ = match_greedy(ious, thr)
            tps[t].extend(flags.tolist())
        # centroid metric runs on every detection, not only the top max_detections
        if all_dets and gts:
            dc = np.array([d.centroid for d in all_dets], dtype=np.float64)
            gc = np.array([g.centroid for g in gts], dtype=np.float64)
            dist = np.hypot(dc[:, None, 0] - gc[None, :, 0], dc[:, None, 1] - gc[None, :, 1])
            flags, _ = match_greedy(dist, config.distance_tolerance, higher_is_better=False)
            loc_tp += int(flags.sum())
        loc_det += len(all_dets)

    aps = [average_precision(scores, tps[t], n_gt) for t in range(len(IOU_THRESHOLDS))]
    ars = [float(np.sum(tps[t]) / n_gt) if n_gt else float("nan") for t in range(len(IOU_THRESHOLDS))]
    return EvalReport(
        mAP=float(np.mean(aps)),
        mAR=float(np.mean(ars)),
        ap50=aps[0],
        ap75=aps[5],
        localization_precision=loc_tp / loc_det if loc_det else 0.0,
        localization_recall=loc_tp / n_gt if n_gt else float("nan"),
        distance_tolerance=config.distance_tolerance,
        n_frames=len(frames),
        n_detections=n_det,
        n_ground_truth=n_gt,
        ap_per_iou=aps,
        ar_per_iou=ars,
    )


def precision_recall_curve(detections: dict, ground_truth: dict, iou: float = 0.5, max_detections: int = 100):
    """Raw (recall, precision) points at one IoU threshold, for plotting."""
    scores, flags, n_gt = [], [], 0
    for f in sorted(ground_truth):
        gts = ground_truth[f]
        n_gt += len(gts)
        dets = _sorted_dets(detections.get(f, []), max_detections)
        ious = box_iou([d.box for d in dets], [g.box for g in gts]) if dets and gts else np.zeros((len(dets), len(gts)))
        tp, _ = match_greedy(ious, iou)
        scores.extend(d.score for d in dets)
        flags.extend(tp.tolist())
    if not scores or n_gt == 0:
        return np.zeros(0), np.zeros(0)
    order = np.argsort(-np.asarray(scores), kind="mergesort")
    tp = np.asarray(flags, dtype=bool)[order]
    cum = np.cumsum(tp)
    return cum / n_gt, cum / np.arange(1, len(tp) + 1)

