"""Bipartite matching between queries and ground truth, and the set-prediction loss."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import torch

from .numerics import log_softmax, softmax


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    no_object: float = 0.1


@dataclass
class MatchResult:
    assignment: np.ndarray  # gt index -> query index
    total_cost: float


def cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def giou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise GIoU of ``a [N, 4]`` and ``b [M, 4]`` in (cx, cy, w, h) -> ``[N, M]``."""
    return _giou(cxcywh_to_xyxy(a)[:, None, :], cxcywh_to_xyxy(b)[None, :, :])


def giou_pairs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU of matched rows of ``a`` and ``b``."""
    return _giou(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))


def _giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou = inter / union
    hull_wh = torch.maximum(a[..., 2:], b[..., 2:]) - torch.minimum(a[..., :2], b[..., :2])
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return iou - (hull - union) / hull


def giou(a, b) -> float:
    """GIoU of two (cx, cy, w, h) boxes."""
    ta = torch.as_tensor(a, dtype=torch.float64).reshape(1, 4)
    tb = torch.as_tensor(b, dtype=torch.float64).reshape(1, 4)
    if (ta[:, 2:] <= 0).any() or (tb[:, 2:] <= 0).any():
        raise ValueError("box width and height must be positive")
    return float(giou_pairs(ta, tb)[0])


def matching_cost(probs: torch.Tensor, boxes: torch.Tensor, gt_boxes: torch.Tensor,
                  weights: LossWeights = LossWeights()) -> np.ndarray:
    """Cost ``[Nq, Ngt]`` = -w_cls p(bubble) + w_l1 |b - b_gt|_1 + w_giou (1 - giou)."""
    with torch.no_grad():
        p = probs[:, 0:1]
        l1 = torch.cdist(boxes, gt_boxes, p=1)
        g = giou_matrix(boxes, gt_boxes)
        cost = -weights.cls * p + weights.l1 * l1 + weights.giou * (1 - g)
    return cost.cpu().numpy().astype(np.float64)


@numba.njit(cache=True)
def _assign(cost):
    # shortest augmenting path with row/column potentials; rows <= columns
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = -1
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col


def hungarian(cost) -> MatchResult:
    """Minimum-cost assignment of every ground truth (column) to a distinct query (row).

    ``cost`` is ``[Nq, Ngt]`` with ``Nq >= Ngt``; surplus queries stay unassigned,
    which is the same as padding with zero-cost dummy columns.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a matrix")
    nq, ngt = c.shape
    if ngt > nq:
        raise ValueError(f"need at least as many queries as ground truths ({nq} < {ngt})")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    if ngt == 0:
        return MatchResult(np.zeros(0, dtype=np.int64), 0.0)
    assignment = _assign(np.ascontiguousarray(c.T))
    total = 0.0
    for g in range(ngt):
        total += c[assignment[g], g]
    return MatchResult(assignment, total)


def layer_loss(logits: torch.Tensor, boxes: torch.Tensor, gt_boxes: torch.Tensor,
               weights: LossWeights, match: MatchResult | None = None):
    """Loss of one decoder layer on one image; returns ``(loss, match, parts)``."""
    ngt = gt_boxes.shape[0]
    if match is None:
        if ngt:
            match = hungarian(matching_cost(softmax(logits, axis=-1), boxes, gt_boxes, weights))
        else:
            match = MatchResult(np.zeros(0, dtype=np.int64), 0.0)
    nq = logits.shape[0]
    target = torch.ones(nq, dtype=torch.long)
    q_idx = torch.as_tensor(match.assignment, dtype=torch.long)
    target[q_idx] = 0
    class_w = torch.full((nq,), weights.no_object, dtype=logits.dtype)
    class_w[q_idx] = 1.0
    logp = log_softmax(logits, axis=-1)
    nll = -logp.gather(1, target[:, None]).squeeze(1)
    ce = (class_w * nll).sum() / class_w.sum()
    if ngt:
        pb = boxes[q_idx]
        l1 = (pb - gt_boxes).abs().sum() / ngt
        gl = (1 - giou_pairs(pb, gt_boxes)).sum() / ngt
    else:
        l1 = gl = logits.new_zeros(())
    loss = weights.cls * ce + weights.l1 * l1 + weights.giou * gl
    parts = {"ce": float(ce.detach()), "l1": float(l1.detach()), "giou": float(gl.detach())}
    return loss, match, parts


def set_loss(logits_per_layer, boxes_per_layer, gt_boxes: torch.Tensor,
             weights: LossWeights = LossWeights(), matches=None):
    """Set-prediction loss of one image, averaged over decoder layers.

    ``logits_per_layer [Dec, Nq, 2]``, ``boxes_per_layer [Dec, Nq, 4]``,
    ``gt_boxes [Ngt, 4]`` normalized (cx, cy, w, h). Pass ``matches`` (one per
    layer) to hold the assignment fixed, e.g. for finite-difference checks.
    Returns ``(loss, matches)``.
    """
    n_layers = len(logits_per_layer)
    total = None
    found = []
    for k in range(n_layers):
        loss, match, _ = layer_loss(logits_per_layer[k], boxes_per_layer[k], gt_boxes, weights,
                                    None if matches is None else matches[k])
        found.append(match)
        total = loss if total is None else total + loss
    return total / n_layers, found
