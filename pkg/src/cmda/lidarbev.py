"""Point cloud -> voxel statistics -> height-compressed BEV map, and the LiDAR encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, Tensor
from .nn import Module, linear, uniform_init, zeros_param
from .scene import UNIFIED_RANGE

RAW_CHANNELS = 3  # normalised count, mean intensity, mean z-offset
XY_CHANNELS = 5  # ... plus mean x- and y-offsets
COUNT_NORM = 64.0  # a voxel holding this many points has count channel 1
_FIXED = 2.0 ** 32  # fixed-point scale for order-independent per-voxel sums


def raw_channels(xy_offsets: bool = False) -> int:
    return XY_CHANNELS if xy_offsets else RAW_CHANNELS


@dataclass(frozen=True)
class VoxelGridSpec:
    range: tuple[float, float, float, float, float, float] = UNIFIED_RANGE
    voxel_size: tuple[float, float, float] = (0.4, 0.4, 0.75)

    def __post_init__(self):
        object.__setattr__(self, "range", tuple(float(v) for v in self.range))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        if min(self.shape) < 1:
            raise ValueError(f"grid must have at least one cell per axis, got {self.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        x0, y0, z0, x1, y1, z1 = self.range
        dx, dy, dz = self.voxel_size
        return (int(round((x1 - x0) / dx)), int(round((y1 - y0) / dy)), int(round((z1 - z0) / dz)))

    @property
    def X(self) -> int:
        return self.shape[0]

    @property
    def Y(self) -> int:
        return self.shape[1]

    @property
    def Z(self) -> int:
        return self.shape[2]

    def cell_center(self, i, j):
        x0, y0 = self.range[0], self.range[1]
        dx, dy = self.voxel_size[0], self.voxel_size[1]
        return x0 + (np.asarray(i) + 0.5) * dx, y0 + (np.asarray(j) + 0.5) * dy

    def voxel_index(self, xyz: np.ndarray):
        """Integer (ix, iy, iz) per point plus an in-range mask.

        Index is floor((coord - min) / size), with coord == max mapped into the last cell.
        """
        lo = np.array(self.range[:3])
        hi = np.array(self.range[3:])
        size = np.array(self.voxel_size)
        n = np.array(self.shape)
        inside = np.all((xyz >= lo) & (xyz <= hi), axis=1)
        idx = np.floor((xyz - lo) / size).astype(np.int64)
        idx = np.clip(idx, 0, n - 1)
        return idx, inside


def voxel_counts(points: np.ndarray, spec: VoxelGridSpec) -> np.ndarray:
    """Integer point count per voxel, shape (X, Y, Z)."""
    X, Y, Z = spec.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    idx, inside = spec.voxel_index(pts[:, :3])
    idx = idx[inside]
    flat = (idx[:, 0] * Y + idx[:, 1]) * Z + idx[:, 2]
    return np.bincount(flat, minlength=X * Y * Z).reshape(X, Y, Z)


def voxelize(points: np.ndarray, spec: VoxelGridSpec, xy_offsets: bool = False) -> np.ndarray:
    """Per-voxel statistics (X, Y, Z, C0): count channel, mean intensity, mean z-offset.

    The count channel is log(1 + n) / log(1 + COUNT_NORM); point counts span
    three orders of magnitude between near ground and far objects, so a
    linear scale would swamp the other channels.  Offsets are measured from
    the voxel centre in units of the voxel pitch and lie in [-0.5, 0.5].
    With ``xy_offsets`` the mean x- and y-offsets are appended (C0 = 5),
    which gives a per-cell head sub-cell position evidence.  Points outside
    the grid range are dropped.
    """
    X, Y, Z = spec.shape
    c0 = raw_channels(xy_offsets)
    out = np.zeros((X, Y, Z, c0))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    if len(pts) == 0:
        return out
    idx, inside = spec.voxel_index(pts[:, :3])
    pts, idx = pts[inside], idx[inside]
    flat = (idx[:, 0] * Y + idx[:, 1]) * Z + idx[:, 2]
    n = X * Y * Z
    counts = np.bincount(flat, minlength=n)
    lo, size = np.array(spec.range[:3]), np.array(spec.voxel_size)
    off = (pts[:, :3] - lo) / size - idx - 0.5
    safe = np.maximum(counts, 1) * _FIXED

    def mean_of(v):
        # integer-valued summands add exactly in any order, so point order cannot matter
        return np.bincount(flat, weights=np.round(v * _FIXED), minlength=n) / safe

    flat_out = out.reshape(n, c0)
    flat_out[:, 0] = np.log1p(counts) / np.log1p(COUNT_NORM)
    flat_out[:, 1] = mean_of(pts[:, 3])
    flat_out[:, 2] = mean_of(off[:, 2])
    if xy_offsets:
        flat_out[:, 3] = mean_of(off[:, 0])
        flat_out[:, 4] = mean_of(off[:, 1])
    return out


def height_compress(vox):
    """Fold the Z axis into channels: out[i, j, z*C + c] = vox[i, j, z, c]."""
    if isinstance(vox, Tensor):
        X, Y, Z, C = vox.shape
        return dc.reshape(vox, (X, Y, Z * C))
    vox = np.asarray(vox)
    X, Y, Z, C = vox.shape
    return vox.reshape(X, Y, Z * C)


def raw_bev(points: np.ndarray, spec: VoxelGridSpec, xy_offsets: bool = False) -> np.ndarray:
    return height_compress(voxelize(points, spec, xy_offsets))


class LidarEncoder(Module):
    """One 3x3 neighbourhood layer + ReLU, then a per-cell linear layer to Z*C channels."""

    def __init__(self, in_channels: int, out_channels: int, hidden: int = 32, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan1 = 9 * in_channels
        self.params["w1"] = uniform_init(rng, fan1, (fan1, hidden))
        self.params["b1"] = zeros_param((hidden,))
        self.params["w2"] = uniform_init(rng, hidden, (hidden, out_channels))
        self.params["b2"] = zeros_param((out_channels,))

    def __call__(self, bev) -> Tensor:
        bev = dc.as_tensor(bev)
        if bev.data.ndim != 3 or bev.shape[-1] != self.in_channels:
            raise ContractError(f"lidar encoder expects (X, Y, {self.in_channels}), got {bev.shape}")
        p = self.params
        h = dc.relu(linear(dc.neighborhood3x3(bev), p["w1"], p["b1"]))
        return linear(h, p["w2"], p["b2"])


def grid_for_experiment(half_extent: float = 40.0, cell: float = 1.6, dz: float = 0.75) -> VoxelGridSpec:
    """Square reduced-range grid used by the desk-scale experiments."""
    return VoxelGridSpec((-half_extent, -half_extent, -2.0, half_extent, half_extent, 4.0), (cell, cell, dz))

