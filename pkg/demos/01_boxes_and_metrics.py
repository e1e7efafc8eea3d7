"""Boxes, IoU and the evaluation protocol, one small step at a time.

Run: python3 demos/01_boxes_and_metrics.py
"""

# %% Boxes are (x, y, z, l, w, h, yaw) with z at the box centre
import math

import numpy as np

from cmda.evaluation import MatchRecord, average_precision, closed_gap, evaluate, match
from cmda.geometry import Box7, bev_corners, iou_3d, iou_bev

car = Box7(10.0, 2.0, -0.8, 4.0, 1.8, 1.5, 0.0)
print("corners (counter-clockwise):")
print(np.round(bev_corners(car), 3))

# %% IoU: a half-length shift leaves a third of the union shared
shifted = Box7(12.0, 2.0, -0.8, 4.0, 1.8, 1.5, 0.0)
print("BEV IoU, half shift:", round(iou_bev(car, shifted), 6))
print("3D IoU, half shift: ", round(iou_3d(car, shifted), 6))

# rotating by 90 degrees about its own centre turns the footprint into a cross
turned = Box7(10.0, 2.0, -0.8, 4.0, 1.8, 1.5, math.pi / 2)
print("BEV IoU, crossed:   ", round(iou_bev(car, turned), 6))

# %% Matching is greedy by score at IoU 0.7; a duplicate is a false positive
gts = [car, Box7(-15.0, 6.0, -0.8, 4.2, 1.9, 1.5, 0.3)]
dets = [(car, 0.9), (car, 0.8), (Box7(30.0, 0.0, -0.8, 4, 2, 1.5, 0.0), 0.4)]
for r in match(dets, gts):
    print(f"det {r.det_id}: score {r.score:.1f} -> {'TP gt ' + str(r.gt_id) if r.is_tp else 'FP'}")

# %% AP over 40 recall positions (R40)
# one TP at 0.9 then an FP at 0.8, two ground truths: recall never passes 1/2
recs = [MatchRecord(0, 0, 1.0, 0.9), MatchRecord(1, None, 0.0, 0.8)]
print("AP, constructed case:", average_precision(recs, n_gt=2))

rep = evaluate([dets], [gts])
print(f"frame report: BEV AP {100 * rep.bev_ap:.2f}, 3D AP {100 * rep.ap_3d:.2f}, tp {rep.tp_3d}, fp {rep.fp_3d}")

# %% Closed gap: share of the Direct Transfer -> Oracle gap a method recovers
print("closed gap (82.13 | 51.84 -> 83.29):", round(closed_gap(82.13, 51.84, 83.29), 2))
print("closed gap (68.95 | 17.92 -> 73.45):", round(closed_gap(68.95, 17.92, 73.45), 2))
