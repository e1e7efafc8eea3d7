"""Independent reference implementations used only by the tests."""

import math

import numpy as np
from scipy.stats import qmc

from cmda.geometry import Box7


def _inside(pts, b: Box7, use_z: bool):
    dx, dy = pts[:, 0] - b.x, pts[:, 1] - b.y
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    u, v = c * dx + s * dy, -s * dx + c * dy
    ok = (np.abs(u) <= b.l / 2) & (np.abs(v) <= b.w / 2)
    if use_z:
        ok &= np.abs(pts[:, 2] - b.z) <= b.h / 2
    return ok


def mc_iou(a: Box7, b: Box7, n: int = 2 ** 20, use_z: bool = False, seed: int = 0) -> float:
    """IoU by scrambled-Sobol sampling of the joint bounding box (areas / volumes of each box are exact)."""
    r = [0.5 * math.hypot(x.l, x.w) for x in (a, b)]
    lo = [min(a.x - r[0], b.x - r[1]), min(a.y - r[0], b.y - r[1])]
    hi = [max(a.x + r[0], b.x + r[1]), max(a.y + r[0], b.y + r[1])]
    if use_z:
        lo.append(min(a.z - a.h / 2, b.z - b.h / 2))
        hi.append(max(a.z + a.h / 2, b.z + b.h / 2))
    lo, hi = np.array(lo), np.array(hi)
    pts = qmc.scale(qmc.Sobol(len(lo), scramble=True, seed=seed).random(n), lo, hi)
    frac = np.mean(_inside(pts, a, use_z) & _inside(pts, b, use_z))
    inter = frac * np.prod(hi - lo)
    va, vb = a.l * a.w, b.l * b.w
    if use_z:
        va, vb = va * a.h, vb * b.h
    return inter / (va + vb - inter)


def brute_nms(boxes, scores, thresh, iou_fn):
    """Suppression-matrix formulation: returns kept indices in score order."""
    n = len(boxes)
    order = sorted(range(n), key=lambda k: (-scores[k], k))
    iou = np.array([[iou_fn(boxes[i], boxes[j]) for j in range(n)] for i in range(n)])
    alive = np.ones(n, dtype=bool)
    kept = []
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        kept.append(i)
        for j in order[pos + 1:]:
            if iou[i, j] >= thresh:
                alive[j] = False
    return kept


def brute_match(dets, scores, gts, thresh, iou_fn):
    """Greedy matching from a full IoU matrix; returns {det index: gt index or None}."""
    iou = np.array([[iou_fn(d, g) for g in gts] for d in dets]).reshape(len(dets), len(gts))
    free = np.ones(len(gts), dtype=bool)
    out = {}
    for k in sorted(range(len(dets)), key=lambda k: -scores[k]):
        cand = np.where(free & (iou[k] >= thresh), iou[k], -1.0)
        if len(gts) and cand.max() >= 0:
            g = int(np.argmax(cand))
            free[g] = False
            out[k] = g
        else:
            out[k] = None
    return out


def brute_ap40(scores, is_tp, n_gt):
    """PR curve by explicit thresholding at every distinct score, then R40 interpolation."""
    scores = np.asarray(scores, dtype=float)
    is_tp = np.asarray(is_tp, dtype=bool)
    points = []
    for t in sorted(set(scores.tolist()), reverse=True):
        sel = scores >= t
        tp = int(np.sum(is_tp & sel))
        points.append((tp / int(np.sum(sel)), tp / n_gt))
    total = 0.0
    for k in range(1, 41):
        r = k / 40
        ps = [p for p, rc in points if rc >= r]
        total += max(ps) if ps else 0.0
    return total / 40
