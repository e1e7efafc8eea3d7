"""Anchor-free per-cell BEV detection head with decoding, NMS, regions and pseudo-labels.

A cell is a positive training target iff a box centre falls inside it.  Box
residuals are encoded relative to the cell centre and a reference size:

    (dx / cell_x, dy / cell_y, z - z_ref, log(l / l_ref), log(w / w_ref),
     log(h / h_ref), sin(yaw), cos(yaw))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, Tensor
from .geometry import Box7, iou_bev
from .lidarbev import VoxelGridSpec
from .mixup import SectorMask
from .nn import Module, linear, uniform_init, zeros_param

BOX_CHANNELS = 8


@dataclass(frozen=True)
class BoxCoder:
    spec: VoxelGridSpec
    z_ref: float = -0.825
    size_ref: tuple[float, float, float] = (4.3, 1.85, 1.55)

    def cell_of(self, x: float, y: float):
        """(i, j) of the BEV cell holding (x, y), or None outside the grid."""
        x0, y0, _, x1, y1, _ = self.spec.range
        if not (x0 <= x <= x1 and y0 <= y <= y1):
            return None
        dx, dy = self.spec.voxel_size[:2]
        i = min(int(math.floor((x - x0) / dx)), self.spec.X - 1)
        j = min(int(math.floor((y - y0) / dy)), self.spec.Y - 1)
        return i, j

    def encode(self, b: Box7, i: int, j: int) -> np.ndarray:
        cx, cy = self.spec.cell_center(i, j)
        dx, dy = self.spec.voxel_size[:2]
        lr, wr, hr = self.size_ref
        return np.array([(b.x - cx) / dx, (b.y - cy) / dy, b.z - self.z_ref,
                         math.log(b.l / lr), math.log(b.w / wr), math.log(b.h / hr),
                         math.sin(b.yaw), math.cos(b.yaw)])

    def decode(self, r, i: int, j: int, class_id: int = 1) -> Box7:
        cx, cy = self.spec.cell_center(i, j)
        dx, dy = self.spec.voxel_size[:2]
        lr, wr, hr = self.size_ref
        return Box7(float(cx + r[0] * dx), float(cy + r[1] * dy), float(r[2] + self.z_ref),
                    float(lr * math.exp(r[3])), float(wr * math.exp(r[4])), float(hr * math.exp(r[5])),
                    float(math.atan2(r[6], r[7])), class_id)


@dataclass
class AssignedTargets:
    objectness: np.ndarray  # (X, Y) in {0, 1}
    pos_index: np.ndarray  # flat cell ids of positives
    residuals: np.ndarray  # (P, 8)


def assign_targets(boxes, coder: BoxCoder) -> AssignedTargets:
    """Mark the cell containing each box centre; the first box wins a shared cell."""
    X, Y = coder.spec.X, coder.spec.Y
    obj = np.zeros((X, Y))
    idx, res = [], []
    for b in boxes:
        cell = coder.cell_of(b.x, b.y)
        if cell is None or obj[cell] == 1:
            continue
        obj[cell] = 1.0
        idx.append(cell[0] * Y + cell[1])
        res.append(coder.encode(b, *cell))
    return AssignedTargets(obj, np.array(idx, dtype=np.int64),
                           np.array(res, dtype=np.float64).reshape(-1, BOX_CHANNELS))


@dataclass
class HeadOutput:
    logits: Tensor  # (X, Y) pre-sigmoid objectness
    objectness: Tensor  # (X, Y)
    box_params: Tensor  # (X, Y, 8)
    cell_features: Tensor  # (X, Y, C_f)


class DetectionHead(Module):
    """Shared per-cell trunk (ZC -> C_f, ReLU) feeding objectness and box heads."""

    def __init__(self, in_channels: int, feat_channels: int = 32, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.feat_channels = feat_channels
        self.params["trunk.w"] = uniform_init(rng, in_channels, (in_channels, feat_channels))
        self.params["trunk.b"] = zeros_param((feat_channels,))
        self.params["obj.w"] = uniform_init(rng, feat_channels, (feat_channels, 1))
        self.params["obj.b"] = zeros_param((1,))
        self.params["box.w"] = uniform_init(rng, feat_channels, (feat_channels, BOX_CHANNELS))
        self.params["box.b"] = zeros_param((BOX_CHANNELS,))

    def __call__(self, bev) -> HeadOutput:
        bev = dc.as_tensor(bev)
        if bev.data.ndim != 3 or bev.shape[-1] != self.in_channels:
            raise ContractError(f"head expects (X, Y, {self.in_channels}), got {bev.shape}")
        X, Y, _ = bev.shape
        p = self.params
        feats = dc.relu(linear(bev, p["trunk.w"], p["trunk.b"]))
        logits = dc.reshape(linear(feats, p["obj.w"], p["obj.b"]), (X, Y))
        box = linear(feats, p["box.w"], p["box.b"])
        return HeadOutput(logits, dc.sigmoid(logits), box, feats)


def head_forward(bev, head: DetectionHead) -> HeadOutput:
    return head(bev)


@dataclass
class Detection:
    box: Box7
    score: float
    instance_feature: np.ndarray
    cell: int  # flat cell id, used for tie-breaking and feature gathering
    region: str | None = None


def decode(out: HeadOutput, coder: BoxCoder, score_thresh: float = 0.3, max_dets: int | None = None) -> list[Detection]:
    """Boxes for every cell with objectness >= score_thresh, highest scores first."""
    scores = out.objectness.data
    X, Y = scores.shape
    flat = scores.reshape(-1)
    cand = np.nonzero(flat >= score_thresh)[0]
    # descending score, ties by lower cell index
    cand = cand[np.lexsort((cand, -flat[cand]))]
    if max_dets is not None:
        cand = cand[:max_dets]
    box = out.box_params.data.reshape(X * Y, BOX_CHANNELS)
    feats = out.cell_features.data.reshape(X * Y, -1)
    dets = []
    for c in cand:
        i, j = divmod(int(c), Y)
        dets.append(Detection(coder.decode(box[c], i, j), float(flat[c]), feats[c].copy(), int(c)))
    return dets


def nms(dets: list[Detection], iou_thresh: float = 0.1, iou_fn=iou_bev) -> list[Detection]:
    """Greedy NMS by descending score (ties: lower cell index) on BEV IoU."""
    order = sorted(dets, key=lambda d: (-d.score, d.cell))
    kept: list[Detection] = []
    for d in order:
        if all(iou_fn(d.box, k.box) < iou_thresh for k in kept):
            kept.append(d)
    return kept


def assign_region(dets: list[Detection], start: float, theta: float) -> list[Detection]:
    """Label each detection source iff its centre azimuth lies in [start, start+theta)."""
    if not dets:
        return dets
    mask = SectorMask(start, theta)
    inside = mask.contains_xy(np.array([d.box.x for d in dets]), np.array([d.box.y for d in dets]))
    for d, s in zip(dets, inside):
        d.region = "source" if s else "target"
    return dets


@dataclass
class PseudoLabelSet:
    boxes: list[Box7] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    threshold: float = 0.6

    def __eq__(self, other):
        if not isinstance(other, PseudoLabelSet):
            return NotImplemented
        return self.boxes == other.boxes and self.scores == other.scores and self.threshold == other.threshold


def make_pseudo_labels(dets: list[Detection], t_pos: float = 0.6) -> PseudoLabelSet:
    keep = [d for d in dets if d.score >= t_pos]
    return PseudoLabelSet([d.box for d in keep], [d.score for d in keep], t_pos)


# ----------------------------------------------------------------- text export


def write_detections(path, rows) -> None:
    """``rows``: iterable of (frame_id, Detection) -> 'frame_id x y z l w h yaw score' lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for fid, d in rows:
            b = d.box
            fh.write(f"{fid} {b.x!r} {b.y!r} {b.z!r} {b.l!r} {b.w!r} {b.h!r} {b.yaw!r} {d.score!r}\n")


def read_detections(path) -> dict[str, list[tuple[Box7, float]]]:
    out: dict[str, list[tuple[Box7, float]]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 9:
            raise ValueError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
        vals = [float(v) for v in parts[1:]]
        out.setdefault(parts[0], []).append((Box7(*vals[:7]), vals[7]))
    return out
