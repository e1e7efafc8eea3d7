"""Cross-domain polar-sector mix-up of point clouds and their labels.

The source keeps the sector [start, start + theta) and the target fills the
exact complement.  The complement is computed as the negation of the source
membership test, so every azimuth belongs to exactly one side even at the
cut lines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box7, azimuth

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SectorMask:
    start: float
    width: float

    def __post_init__(self):
        if not 0.0 <= self.width <= TWO_PI:
            raise ValueError(f"sector width must lie in [0, 2*pi], got {self.width}")
        object.__setattr__(self, "start", float(self.start) % TWO_PI)

    def contains_azimuth(self, az) -> np.ndarray:
        rel = np.mod(np.asarray(az, dtype=np.float64) - self.start, TWO_PI)
        rel = np.where(rel >= TWO_PI, 0.0, rel)
        return rel < self.width

    def contains_xy(self, x, y) -> np.ndarray:
        return self.contains_azimuth(azimuth(np.asarray(x), np.asarray(y)))


def _label_mask(labels, mask: SectorMask) -> np.ndarray:
    if not labels:
        return np.zeros(0, dtype=bool)
    xs = np.array([b.x for b in labels])
    ys = np.array([b.y for b in labels])
    return mask.contains_xy(xs, ys)


def sector_filter(points: np.ndarray, labels, mask: SectorMask, invert: bool = False):
    """Points whose azimuth lies in the sector, and labels whose centre does."""
    points = np.asarray(points)
    pin = mask.contains_xy(points[:, 0], points[:, 1]) if len(points) else np.zeros(0, dtype=bool)
    lin = _label_mask(labels, mask)
    if invert:
        pin, lin = ~pin, ~lin
    return points[pin], [b for b, keep in zip(labels, lin) if keep]


@dataclass
class MixedFrame:
    points: np.ndarray
    labels: list[tuple[Box7, str]] = field(default_factory=list)
    theta: float = 0.0
    start: float = 0.0
    point_origin: np.ndarray | None = None  # per-point "source"/"target" flag (True = source)

    @property
    def boxes(self) -> list[Box7]:
        return [b for b, _ in self.labels]


def polar_mix(source_points, source_labels, target_points, target_labels,
              theta: float, start: float) -> MixedFrame:
    """Source sector [start, start+theta) concatenated with the target's complement.

    ``target_labels`` are pseudo-labels in the self-training loop.
    """
    mask = SectorMask(start, theta)
    sp, sl = sector_filter(source_points, source_labels, mask)
    tp, tl = sector_filter(target_points, target_labels, mask, invert=True)
    points = np.concatenate([sp, tp], axis=0) if len(sp) or len(tp) else np.zeros((0, 4), dtype=np.float32)
    origin = np.concatenate([np.ones(len(sp), dtype=bool), np.zeros(len(tp), dtype=bool)])
    labels = [(b, "source") for b in sl] + [(b, "target") for b in tl]
    return MixedFrame(points, labels, theta, mask.start, origin)


def polar_mix_frames(source, target, theta: float, start: float, target_labels=None) -> MixedFrame:
    """Frame-level convenience wrapper; pseudo-labels override the target's own labels."""
    tl = target.labels if target_labels is None else target_labels
    return polar_mix(source.points, source.labels, target.points, tl, theta, start)


def sample_theta(rng: np.random.Generator, low: float = math.pi / 2, high: float = 3 * math.pi / 2):
    """Sector width uniform in [low, high], start uniform in [0, 2*pi)."""
    theta = float(rng.uniform(low, high))
    start = float(rng.uniform(0.0, TWO_PI))
    return theta, start
