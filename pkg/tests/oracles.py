"""Independent reference implementations used by the tests.

Each oracle is written from the textbook definition with plain loops and no
code shared with the package, so agreement is evidence rather than echo.
"""

from __future__ import annotations

import itertools
import math

import mpmath
import numpy as np


def matmul(x, w, b):
    n, din = len(x), len(x[0])
    dout = len(w[0])
    return [[sum(x[i][k] * w[k][j] for k in range(din)) + b[j] for j in range(dout)] for i in range(n)]


def softmax_mp(v, digits: int = 50):
    with mpmath.workdps(digits):
        e = [mpmath.exp(mpmath.mpf(float(a))) for a in v]
        s = mpmath.fsum(e)
        return [float(a / s) for a in e]


def bilinear(feat, x: float, y: float):
    """feat[c][i][j]; node (i, j) at (x=j, y=i); zero outside the map."""
    c_n, h, w = len(feat), len(feat[0]), len(feat[0][0])
    j0, i0 = math.floor(x), math.floor(y)
    out = [0.0] * c_n
    for i, j in ((i0, j0), (i0, j0 + 1), (i0 + 1, j0), (i0 + 1, j0 + 1)):
        if 0 <= i < h and 0 <= j < w:
            wgt = (1 - abs(x - j)) * (1 - abs(y - i))
            for c in range(c_n):
                out[c] += wgt * feat[c][i][j]
    return out


def brute_force_assignment(cost):
    """Minimum over all injections of rows-of-gt (columns of ``cost``) into queries (rows)."""
    nq, ngt = len(cost), len(cost[0]) if cost else 0
    best = None
    for perm in itertools.permutations(range(nq), ngt):
        total = 0.0
        for g, q in enumerate(perm):
            total += cost[q][g]
        if best is None or total < best:
            best = total
    return best if best is not None else 0.0


def raster_giou(a, b, n: int = 2000):
    """GIoU of (cx, cy, w, h) boxes by counting cell centers of an n x n grid over the hull."""
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    hx0, hy0 = min(ax0, bx0), min(ay0, by0)
    hx1, hy1 = max(ax1, bx1), max(ay1, by1)
    xs = hx0 + (np.arange(n) + 0.5) * (hx1 - hx0) / n
    ys = hy0 + (np.arange(n) + 0.5) * (hy1 - hy0) / n
    in_ax = (xs >= ax0) & (xs < ax1)
    in_bx = (xs >= bx0) & (xs < bx1)
    in_ay = (ys >= ay0) & (ys < ay1)
    in_by = (ys >= by0) & (ys < by1)
    ina = in_ay[:, None] & in_ax[None, :]
    inb = in_by[:, None] & in_bx[None, :]
    inter = (ina & inb).sum()
    union = (ina | inb).sum()
    hull = n * n
    return inter / union - (hull - union) / hull


def iou_xywh(a, b):
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def coco_map(dets, gts, max_dets: int = 100):
    """Straight transcription of the COCO single-class recipe.

    ``dets[f] = [(score, box)]``, ``gts[f] = [box]``. Returns (mAP, per-threshold APs).
    """
    thresholds = [(50 + 5 * k) / 100 for k in range(10)]
    n_gt = sum(len(v) for v in gts.values())
    aps = []
    for thr in thresholds:
        records = []
        for f in sorted(gts):
            ds = sorted(dets.get(f, []), key=lambda d: (-d[0], tuple(d[1])))[:max_dets]
            used = set()
            for score, box in ds:
                best, best_iou = None, None
                for g, gbox in enumerate(gts[f]):
                    if g in used:
                        continue
                    v = iou_xywh(box, gbox)
                    if v >= thr and (best_iou is None or v > best_iou):
                        best, best_iou = g, v
                if best is not None:
                    used.add(best)
                records.append((score, best is not None))
        records.sort(key=lambda r: -r[0])
        tp = fp = 0
        prec, rec = [], []
        for _, hit in records:
            tp += hit
            fp += not hit
            prec.append(tp / (tp + fp))
            rec.append(tp / n_gt)
        # precision envelope from the right
        for i in range(len(prec) - 2, -1, -1):
            prec[i] = max(prec[i], prec[i + 1])
        total = 0.0
        for k in range(101):
            r = k / 100
            q = 0.0
            for i in range(len(rec)):
                if rec[i] >= r:
                    q = prec[i]
                    break
            total += q
        aps.append(total / 101)
    return sum(aps) / len(aps), aps


def splat_moments(grid):
    """Total mass and center of mass (x, y) of a 2-D grid, pixel centers at +0.5."""
    total = 0.0
    sx = sy = 0.0
    for i, row in enumerate(grid):
        for j, v in enumerate(row):
            total += v
            sx += v * (j + 0.5)
            sy += v * (i + 0.5)
    return total, sx / total, sy / total


def dedup_clusters(dets, half_w: float, half_h: float, band: float, radius: float):
    """Reference border dedup.

    ``dets`` = [(x, y, score, patch)] in frame coordinates. Visit by (score desc,
    patch asc, position in list); keep a detection unless some kept one from
    another patch shares a boundary with it, both lie in the band of every
    shared boundary and they are within ``radius``.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], dets[i][3], i))
    kept = []
    for i in order:
        x, y, s, p = dets[i]
        dup = False
        for k in kept:
            kx, ky, ks, kp = dets[k]
            if kp == p:
                continue
            same_col = (kp % 2) == (p % 2)
            same_row = (kp // 2) == (p // 2)
            ok = True
            if not same_col:
                ok &= abs(x - half_w) <= band and abs(kx - half_w) <= band
            if not same_row:
                ok &= abs(y - half_h) <= band and abs(ky - half_h) <= band
            if ok and math.hypot(x - kx, y - ky) <= radius:
                dup = True
                break
        if not dup:
            kept.append(i)
    return sorted(kept)
