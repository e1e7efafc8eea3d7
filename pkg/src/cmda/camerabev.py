"""Lift-splat view transform from a single camera image to a BEV feature map.

image --encoder--> (features F_I, depth distribution) --lift--> frustum
features (outer product) --splat--> voxel grid (nearest voxel, mean pooled)
--voxel_refine--> --height_compress--> BEV map with the LiDAR map's shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, Tensor
from .lidarbev import VoxelGridSpec, height_compress
from .nn import Module, linear, uniform_init, zeros_param
from .scene import CameraFrame, unproject


def depth_bins(n_bins: int = 16, near: float = 1.0, far: float = 60.0):
    """Uniform bin edges (D+1,) and centres (D,) in metres."""
    edges = np.linspace(near, far, n_bins + 1)
    return edges, 0.5 * (edges[:-1] + edges[1:])


@dataclass
class DepthDistribution:
    probs: Tensor  # (H, W, D)
    edges: np.ndarray  # (D+1,)


class ImageEncoder(Module):
    """3x3 neighbourhood layer over RGB, then a feature head and a depth-classification head.

    The depth head also sees normalised pixel coordinates (row height is a
    strong depth cue for ground-standing objects).  The feature head sees
    only image content, so a black image yields zero features.
    """

    def __init__(self, out_channels: int, n_bins: int = 16, hidden: int = 16, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.out_channels = out_channels
        self.n_bins = n_bins
        self.params["w1"] = uniform_init(rng, 27, (27, hidden))
        self.params["b1"] = zeros_param((hidden,))
        self.params["wf"] = uniform_init(rng, hidden, (hidden, out_channels))
        self.params["bf"] = zeros_param((out_channels,))
        self.params["wd"] = uniform_init(rng, hidden + 2, (hidden, n_bins))
        self.params["wc"] = uniform_init(rng, hidden + 2, (2, n_bins))
        self.params["bd"] = zeros_param((n_bins,))

    def __call__(self, image) -> tuple[Tensor, Tensor]:
        img = dc.as_tensor(image)
        if img.data.ndim != 3 or img.shape[-1] != 3:
            raise ContractError(f"image encoder expects (H, W, 3), got {img.shape}")
        H, W, _ = img.shape
        p = self.params
        h = dc.relu(linear(dc.neighborhood3x3(img), p["w1"], p["b1"]))
        feats = linear(h, p["wf"], p["bf"])
        vv, uu = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
        coords = Tensor(np.stack([uu, vv], axis=-1) - 0.5)
        logits = dc.add(dc.add(dc.matmul(h, p["wd"]), dc.matmul(coords, p["wc"])), p["bd"])
        return feats, dc.softmax(logits)


def image_encoder(img: CameraFrame, encoder: ImageEncoder, edges: np.ndarray | None = None):
    feats, probs = encoder(img.features)
    if edges is None:
        edges, _ = depth_bins(encoder.n_bins)
    return feats, DepthDistribution(probs, edges)


def lift(feats, depth) -> Tensor:
    """Frustum features out[h, w, d, c] = depth[h, w, d] * feats[h, w, c]."""
    probs = depth.probs if isinstance(depth, DepthDistribution) else depth
    feats, probs = dc.as_tensor(feats), dc.as_tensor(probs)
    if feats.shape[:2] != probs.shape[:2]:
        raise ContractError(f"lift: feature map {feats.shape} and depth {probs.shape} differ in H, W")
    return dc.outer(probs, feats)


@dataclass
class SplatGeometry:
    """Fixed frustum-cell -> voxel assignment for one camera/grid pairing."""

    rows: np.ndarray  # flat frustum-cell ids that land inside the grid
    voxel: np.ndarray  # their flat voxel ids
    weight: np.ndarray  # 1 / contributor count of the target voxel
    n_voxels: int
    coverage: np.ndarray  # (X, Y) bool, BEV cells reached by any frustum cell


_GEOM_CACHE: dict = {}


def splat_geometry(H: int, W: int, centers: np.ndarray, intrinsics, extrinsics,
                   spec: VoxelGridSpec) -> SplatGeometry:
    K = np.asarray(intrinsics, dtype=np.float64)
    E = np.asarray(extrinsics, dtype=np.float64)
    if abs(np.linalg.det(K)) < 1e-12:
        raise ContractError("splat: camera intrinsics are singular")
    key = (H, W, tuple(np.round(centers, 12)), K.tobytes(), E.tobytes(), spec)
    hit = _GEOM_CACHE.get(key)
    if hit is not None:
        return hit
    D = len(centers)
    vv, uu = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    uv = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    uv = np.repeat(uv, D, axis=0)
    depth = np.tile(centers, H * W)
    world = unproject(uv, depth, K, E)
    idx, inside = spec.voxel_index(world)
    X, Y, Z = spec.shape
    rows = np.nonzero(inside)[0]
    idx = idx[inside]
    vox = (idx[:, 0] * Y + idx[:, 1]) * Z + idx[:, 2]
    n_vox = X * Y * Z
    counts = np.bincount(vox, minlength=n_vox)
    weight = 1.0 / counts[vox] if len(vox) else np.zeros(0)
    coverage = (counts.reshape(X, Y, Z) > 0).any(axis=2)
    geom = SplatGeometry(rows, vox, weight, n_vox, coverage)
    if len(_GEOM_CACHE) > 32:
        _GEOM_CACHE.clear()
    _GEOM_CACHE[key] = geom
    return geom


def splat(frustum, intrinsics, extrinsics, spec: VoxelGridSpec, centers: np.ndarray) -> Tensor:
    """Mean-pool frustum features into the voxel grid -> (X, Y, Z, C).

    Each frustum cell sits at its pixel centre and depth-bin centre; cells
    whose world position falls outside the grid range contribute nothing.
    """
    frustum = dc.as_tensor(frustum)
    H, W, D, C = frustum.shape
    geom = splat_geometry(H, W, np.asarray(centers), intrinsics, extrinsics, spec)
    flat = dc.reshape(frustum, (H * W * D, C))
    picked = dc.take_rows(flat, geom.rows)
    vox = dc.scatter_add(picked, geom.voxel, geom.weight, geom.n_voxels)
    X, Y, Z = spec.shape
    return dc.reshape(vox, (X, Y, Z, C))


class CameraStream(Module):
    """Image encoder plus the per-voxel refinement layer; yields F_I^bev."""

    def __init__(self, channels: int, n_bins: int = 16, near: float = 1.0, far: float = 60.0,
                 hidden: int = 16, seed: int = 0):
        super().__init__()
        self.channels = channels
        self.encoder = ImageEncoder(channels, n_bins, hidden, seed=seed)
        self.edges, self.centers = depth_bins(n_bins, near, far)
        rng = np.random.default_rng(seed + 7919)
        for k, v in self.encoder.params.items():
            self.params["enc." + k] = v
        self.params["refine.w"] = uniform_init(rng, channels, (channels, channels))
        self.params["refine.b"] = zeros_param((channels,))

    def voxel_features(self, cam: CameraFrame, spec: VoxelGridSpec) -> Tensor:
        feats, depth = image_encoder(cam, self.encoder, self.edges)
        frustum = lift(feats, depth)
        return splat(frustum, cam.intrinsics, cam.extrinsics, spec, self.centers)

    def __call__(self, cam: CameraFrame, spec: VoxelGridSpec) -> Tensor:
        vox = self.voxel_features(cam, spec)
        refined = linear(vox, self.params["refine.w"], self.params["refine.b"])
        return height_compress(refined)

    def coverage(self, cam: CameraFrame, spec: VoxelGridSpec) -> np.ndarray:
        H, W, _ = cam.features.shape
        return splat_geometry(H, W, self.centers, cam.intrinsics, cam.extrinsics, spec).coverage


def camera_bev(cam: CameraFrame, stream: CameraStream, spec: VoxelGridSpec) -> Tensor:
    return stream(cam, spec)
