"""KITTI-style evaluation: greedy matching, AP over 40 recall positions, Closed Gap, breakdowns.

Difficulty tiers are not modelled; every ground-truth box belongs to a
single tier and reports say so.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Box7, iou_3d, iou_bev, points_in_box

RECALL_POSITIONS = 40
RANGE_BUCKETS = (("0-20m", 0.0, 20.0), ("20-40m", 20.0, 40.0), ("40m+", 40.0, math.inf))
POINT_BUCKETS = (("0-9pts", 0, 10), ("10-49pts", 10, 50), ("50-199pts", 50, 200), ("200+pts", 200, math.inf))


class UndefinedResultError(ArithmeticError):
    pass


@dataclass
class MatchRecord:
    det_id: int
    gt_id: int | None
    iou: float
    score: float
    frame: int = 0

    @property
    def is_tp(self) -> bool:
        return self.gt_id is not None


def _box_score(d):
    if hasattr(d, "box"):
        return d.box, float(d.score)
    box, score = d
    return box, float(score)


def match(dets, gts, iou_fn=iou_3d, thresh: float = 0.7, frame: int = 0) -> list[MatchRecord]:
    """Greedy matching in descending score order: each detection takes the
    highest-IoU still-unmatched ground truth with IoU >= thresh, otherwise it
    is a false positive.  Equal scores keep their input order.
    """
    pairs = [_box_score(d) for d in dets]
    order = sorted(range(len(pairs)), key=lambda k: -pairs[k][1])
    taken = [False] * len(gts)
    records = []
    for k in order:
        box, score = pairs[k]
        best, best_iou = None, -1.0
        for g, gt in enumerate(gts):
            if taken[g]:
                continue
            v = iou_fn(box, gt)
            if v >= thresh and v > best_iou:
                best, best_iou = g, v
        if best is not None:
            taken[best] = True
        records.append(MatchRecord(k, best, max(best_iou, 0.0), score, frame))
    return records


def precision_recall(records, n_gt: int):
    """Precision and recall at every distinct score threshold, highest first."""
    if not records:
        return np.zeros(0), np.zeros(0)
    scores = np.array([r.score for r in records])
    tp = np.array([r.is_tp for r in records], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    # keep only the last index of each run of equal scores
    last = np.r_[scores[1:] != scores[:-1], True]
    ctp, cfp = ctp[last], cfp[last]
    return ctp / (ctp + cfp), ctp / n_gt


def average_precision(records, n_gt: int) -> float | None:
    """Mean interpolated precision at recall r in {1/40, ..., 40/40}.

    Interpolated precision is the maximum precision over operating points
    with recall >= r (0 if r is never reached).  Returns None when n_gt == 0.
    """
    if n_gt <= 0:
        return None
    prec, rec = precision_recall(records, n_gt)
    if len(prec) == 0:
        return 0.0
    # running max from the low-score end gives max precision at recall >= rec[k]
    best_from = np.maximum.accumulate(prec[::-1])[::-1]
    total = 0.0
    for k in range(1, RECALL_POSITIONS + 1):
        r = k / RECALL_POSITIONS
        hit = np.nonzero(rec >= r)[0]
        if hit.size:
            total += best_from[hit[0]]
    return total / RECALL_POSITIONS


def closed_gap(ap_model: float, ap_direct: float, ap_oracle: float) -> float:
    """Share (in percent) of the Direct-Transfer -> Oracle gap recovered by a model."""
    denom = ap_oracle - ap_direct
    if denom == 0:
        raise UndefinedResultError("closed gap undefined: oracle AP equals direct-transfer AP")
    return (ap_model - ap_direct) / denom * 100.0


@dataclass
class EvalReport:
    bev_ap: float | None
    ap_3d: float | None
    n_gt: int
    n_det: int
    tp_3d: int
    fp_3d: int
    tp_bev: int
    fp_bev: int
    range_buckets: dict = field(default_factory=dict)
    point_buckets: dict = field(default_factory=dict)
    iou_thresh: float = 0.7
    label: str = "standard"
    difficulty: str = "single tier (no KITTI difficulty filtering)"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def csv_rows(self):
        rows = []
        for metric in ("bev_ap", "ap_3d", "n_gt", "n_det", "tp_3d", "fp_3d", "tp_bev", "fp_bev"):
            rows.append((metric, "all", getattr(self, metric)))
        for group in (self.range_buckets, self.point_buckets):
            for bucket, stats in group.items():
                for k, v in stats.items():
                    rows.append((k, bucket, v))
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "bucket", "value"])
            for metric, bucket, value in self.csv_rows():
                w.writerow([metric, bucket, "" if value is None else value])


def _bucket_of(value: float, buckets) -> str:
    for name, lo, hi in buckets:
        if lo <= value < hi:
            return name
    return buckets[-1][0]


def breakdown(records, gts_per_frame, dets_per_frame, clouds_per_frame) -> tuple[dict, dict]:
    """Recall and AP per range bucket and per points-in-box bucket.

    True positives fall in their ground truth's bucket; false positives are
    bucketed by the detection's own range / enclosed point count.  Buckets
    without ground truth are omitted.
    """
    def gt_props(f, g):
        b = gts_per_frame[f][g]
        return math.hypot(b.x, b.y), len(points_in_box(clouds_per_frame[f], b))

    def det_props(f, d):
        b, _ = _box_score(dets_per_frame[f][d])
        return math.hypot(b.x, b.y), len(points_in_box(clouds_per_frame[f], b))

    out = []
    for which, buckets in ((0, RANGE_BUCKETS), (1, POINT_BUCKETS)):
        n_gt = {name: 0 for name, *_ in buckets}
        recs = {name: [] for name, *_ in buckets}
        for f, gts in enumerate(gts_per_frame):
            for g in range(len(gts)):
                n_gt[_bucket_of(gt_props(f, g)[which], buckets)] += 1
        for r in records:
            prop = gt_props(r.frame, r.gt_id) if r.is_tp else det_props(r.frame, r.det_id)
            recs[_bucket_of(prop[which], buckets)].append(r)
        section = {}
        for name, *_ in buckets:
            if n_gt[name] == 0:
                continue
            tp = sum(r.is_tp for r in recs[name])
            section[name] = {"n_gt": n_gt[name], "tp": tp, "recall": tp / n_gt[name],
                             "ap": average_precision(recs[name], n_gt[name])}
        out.append(section)
    return out[0], out[1]


def evaluate(dets_per_frame, gts_per_frame, clouds_per_frame=None, iou_thresh: float = 0.7,
             label: str = "standard") -> EvalReport:
    """Match every frame, then aggregate AP (BEV and 3D) and the 3D-IoU breakdowns."""
    rec_3d, rec_bev = [], []
    for f, (dets, gts) in enumerate(zip(dets_per_frame, gts_per_frame)):
        rec_3d += match(dets, gts, iou_3d, iou_thresh, frame=f)
        rec_bev += match(dets, gts, iou_bev, iou_thresh, frame=f)
    n_gt = sum(len(g) for g in gts_per_frame)
    rb, pb = ({}, {})
    if clouds_per_frame is not None:
        rb, pb = breakdown(rec_3d, gts_per_frame, dets_per_frame, clouds_per_frame)
    tp3 = sum(r.is_tp for r in rec_3d)
    tpb = sum(r.is_tp for r in rec_bev)
    return EvalReport(
        bev_ap=average_precision(rec_bev, n_gt), ap_3d=average_precision(rec_3d, n_gt),
        n_gt=n_gt, n_det=len(rec_3d), tp_3d=tp3, fp_3d=len(rec_3d) - tp3, tp_bev=tpb,
        fp_bev=len(rec_bev) - tpb, range_buckets=rb, point_buckets=pb, iou_thresh=iou_thresh, label=label,
    )


def boxes_as_dets(boxes: list[Box7], score: float = 1.0):
    return [(b, score) for b in boxes]
