"""Oriented 3D boxes: corners, rotated BEV / 3D IoU, point containment.

Boxes use the seven-parameter layout ``(x, y, z, l, w, h, yaw)`` with ``l``
along the heading direction.  Rotated overlaps are computed by exact convex
polygon clipping (Sutherland-Hodgman), so results are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into [-pi, pi); in-range values are returned untouched."""
    if -math.pi <= yaw < math.pi:
        return float(yaw)
    out = (yaw + math.pi) % (2.0 * math.pi) - math.pi
    # float modulo can land exactly on +pi
    return -math.pi if out >= math.pi else out


@dataclass(frozen=True)
class Box7:
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float
    class_id: int = 1

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got l={self.l} w={self.w} h={self.h}")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def as_array(self) -> np.ndarray:
        """The 8-vector ``(x, y, z, l, w, h, yaw, class_id)``."""
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.yaw, self.class_id], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box7":
        a = [float(v) for v in a]
        cls_id = int(round(a[7])) if len(a) > 7 else 1
        return cls(a[0], a[1], a[2], a[3], a[4], a[5], a[6], cls_id)

    def rotated_about_origin(self, angle: float) -> "Box7":
        c, s = math.cos(angle), math.sin(angle)
        return Box7(c * self.x - s * self.y, s * self.x + c * self.y, self.z,
                    self.l, self.w, self.h, self.yaw + angle, self.class_id)


def boxes_to_array(boxes) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 8))
    return np.stack([b.as_array() for b in boxes])


def bev_corners(b: Box7) -> np.ndarray:
    """Four footprint corners as a (4, 2) array, counter-clockwise."""
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    hl, hw = b.l / 2.0, b.w / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    # CCW in the local frame: (+,+) -> (-,+) -> (-,-) -> (+,-)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([b.x, b.y])


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: intersection of ``subject`` with convex CCW ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp = out
        out = []
        for k in range(len(inp)):
            cur, prev = inp[k], inp[k - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: Box7, b: Box7) -> float:
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.x - b.x, a.y - b.y) > ra + rb:
        return 0.0
    poly = clip_convex(bev_corners(a), bev_corners(b))
    if len(poly) < 3:
        return 0.0
    return max(polygon_area(poly), 0.0)


def _sym(fn):
    # evaluate in a canonical argument order so iou(a, b) == iou(b, a) bit-exactly
    def wrapper(a: Box7, b: Box7) -> float:
        if tuple(b.as_array()) < tuple(a.as_array()):
            a, b = b, a
        return fn(a, b)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_sym
def iou_bev(a: Box7, b: Box7) -> float:
    """Intersection over union of the two rotated footprints."""
    inter = bev_intersection_area(a, b)
    union = a.l * a.w + b.l * b.w - inter
    if inter <= 0.0 or union <= 0.0:
        return 0.0
    return min(inter / union, 1.0)


@_sym
def iou_3d(a: Box7, b: Box7) -> float:
    """Footprint intersection times vertical overlap, over the union of volumes."""
    zlo = max(a.z - a.h / 2.0, b.z - b.h / 2.0)
    zhi = min(a.z + a.h / 2.0, b.z + b.h / 2.0)
    dz = zhi - zlo
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    if inter <= 0.0 or union <= 0.0:
        return 0.0
    return min(inter / union, 1.0)


def points_in_box(points: np.ndarray, b: Box7) -> np.ndarray:
    """Indices of points inside the rotated box; boundary points count as inside."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    dx = pts[:, 0] - b.x
    dy = pts[:, 1] - b.y
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    dz = pts[:, 2] - b.z
    inside = (np.abs(u) <= b.l / 2.0) & (np.abs(v) <= b.w / 2.0) & (np.abs(dz) <= b.h / 2.0)
    return np.nonzero(inside)[0]


def azimuth(x, y):
    """atan2(y, x) mapped into [0, 2*pi)."""
    a = np.mod(np.arctan2(y, x), 2.0 * np.pi)
    # tiny negative angles round up to exactly 2*pi
    return np.where(a >= 2.0 * np.pi, 0.0, a)
