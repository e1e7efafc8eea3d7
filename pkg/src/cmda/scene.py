"""Synthetic two-domain LiDAR scenes, camera rendering and the binary frame format.

Scenes are produced by 2.5D ray casting from a sensor at the origin: beams at
fixed elevations sweep 360 degrees of azimuth and keep their first hit among
the ground plane and the faces of car-like boxes.  Two presets encode the
density and object-scale shift between a dense (64-beam, large objects)
source domain and a sparse (32-beam, smaller objects) target domain.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box7

UNIFIED_RANGE = (-75.2, -75.2, -2.0, 75.2, 75.2, 4.0)
GROUND_Z = -1.6
# objects are placed in this annulus (metres from the sensor)
PLACEMENT_RADIUS = (5.0, 36.0)
WIDTH_MEAN, WIDTH_STD = 1.85, 0.08
HEIGHT_MEAN, HEIGHT_STD = 1.55, 0.08
YAW_JITTER = 0.1
# a placed object must catch this many rays of a fixed 64-beam reference sweep,
# so fully occluded objects are resampled the same way for every beam count
MIN_VISIBLE_RAYS = 8

MAGIC = b"CMDA"
FORMAT_VERSION = 1
DOMAINS = ("source", "target")


class FrameFormatError(ValueError):
    """Malformed frame file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class FrameVersionError(FrameFormatError):
    pass


@dataclass
class DomainSpec:
    beam_count: int
    beam_elevations: tuple[float, ...]
    points_per_beam: int
    object_length_mean: float
    object_length_std: float
    object_count_range: tuple[int, int]
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.beam_elevations = tuple(float(e) for e in self.beam_elevations)
        self.object_count_range = tuple(int(v) for v in self.object_count_range)
        if self.beam_count != len(self.beam_elevations):
            raise ValueError("beam_count must equal len(beam_elevations)")
        if not (self.object_length_mean > 3 * self.object_length_std > 0):
            raise ValueError("need object_length_mean > 3 * object_length_std > 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        lo, hi = self.object_count_range
        if not 0 <= lo <= hi:
            raise ValueError("object_count_range must satisfy 0 <= min <= max")
        if self.points_per_beam < 1:
            raise ValueError("points_per_beam must be positive")


def beam_fan(n: int, lowest_deg: float = -24.0, highest_deg: float = 2.0) -> tuple[float, ...]:
    return tuple(np.deg2rad(np.linspace(lowest_deg, highest_deg, n)).tolist())


def source_preset(seed: int = 0, **overrides) -> DomainSpec:
    kw = dict(beam_count=64, beam_elevations=beam_fan(64), points_per_beam=720,
              object_length_mean=4.6, object_length_std=0.25,
              object_count_range=(4, 10), dropout_rate=0.0, seed=seed)
    kw.update(overrides)
    if "beam_count" in overrides and "beam_elevations" not in overrides:
        kw["beam_elevations"] = beam_fan(kw["beam_count"])
    return DomainSpec(**kw)


def target_preset(seed: int = 1, **overrides) -> DomainSpec:
    kw = dict(beam_count=32, beam_elevations=beam_fan(32), points_per_beam=720,
              object_length_mean=4.0, object_length_std=0.25,
              object_count_range=(4, 10), dropout_rate=0.0, seed=seed)
    kw.update(overrides)
    if "beam_count" in overrides and "beam_elevations" not in overrides:
        kw["beam_elevations"] = beam_fan(kw["beam_count"])
    return DomainSpec(**kw)


@dataclass
class CameraFrame:
    features: np.ndarray  # (H, W, 3) float32
    intrinsics: np.ndarray  # (3, 3)
    extrinsics: np.ndarray  # (4, 4) world -> camera

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float32)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float32)
        if self.features.ndim != 3 or self.features.shape[2] != 3:
            raise ValueError(f"camera features must be HxWx3, got {self.features.shape}")
        if abs(np.linalg.det(self.intrinsics.astype(np.float64))) < 1e-12:
            raise ValueError("camera intrinsics are singular")
        rot = self.extrinsics[:3, :3].astype(np.float64)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("camera extrinsics rotation is not orthonormal")

    def __eq__(self, other):
        if not isinstance(other, CameraFrame):
            return NotImplemented
        return (_same(self.features, other.features) and _same(self.intrinsics, other.intrinsics)
                and _same(self.extrinsics, other.extrinsics))


@dataclass
class Frame:
    id: str
    domain: str
    points: np.ndarray  # (N, 4) float32: x, y, z, intensity
    labels: list[Box7] = field(default_factory=list)
    camera: CameraFrame | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.id == other.id and self.domain == other.domain
                and _same(self.points, other.points) and self.labels == other.labels
                and self.camera == other.camera)

    def without_labels(self) -> "Frame":
        return Frame(self.id, self.domain, self.points, [], self.camera)


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def _f32(v: float) -> float:
    return float(np.float32(v))


def crop_to_range(points: np.ndarray, rng_box=UNIFIED_RANGE) -> np.ndarray:
    x0, y0, z0, x1, y1, z1 = rng_box
    p = points
    keep = ((p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)
            & (p[:, 2] >= z0) & (p[:, 2] <= z1))
    return p[keep]


# ------------------------------------------------------------------ generation


def _sample_objects(spec: DomainSpec, rng: np.random.Generator) -> list[Box7]:
    lo, hi = spec.object_count_range
    n = int(rng.integers(lo, hi + 1))
    boxes: list[Box7] = []
    ref = _reference_rays()
    hits = [np.where(ref[:, 2] < 0, GROUND_Z / np.minimum(ref[:, 2], -1e-12), np.inf)]
    attempts = 0
    while len(boxes) < n and attempts < 50 * max(n, 1):
        attempts += 1
        r = rng.uniform(*PLACEMENT_RADIUS)
        az = rng.uniform(0.0, 2.0 * math.pi)
        length = max(rng.normal(spec.object_length_mean, spec.object_length_std), 0.5)
        width = max(rng.normal(WIDTH_MEAN, WIDTH_STD), 0.5)
        height = max(rng.normal(HEIGHT_MEAN, HEIGHT_STD), 0.5)
        yaw = rng.choice([0.0, math.pi / 2]) + rng.normal(0.0, YAW_JITTER)
        x, y = r * math.cos(az), r * math.sin(az)
        radius = 0.5 * math.hypot(length, width)
        if any(math.hypot(x - b.x, y - b.y) < radius + 0.5 * math.hypot(b.l, b.w) + 0.3 for b in boxes):
            continue
        z = GROUND_Z + height / 2.0
        box = Box7(_f32(x), _f32(y), _f32(z), _f32(length), _f32(width), _f32(height), yaw, 1)
        t = _ray_box_hits(ref, box)
        owner = np.argmin(np.stack(hits + [t]), axis=0)
        if np.bincount(owner, minlength=len(hits) + 1)[1:].min() < MIN_VISIBLE_RAYS:
            continue  # the candidate is hidden, or it hides an earlier object
        hits.append(t)
        boxes.append(box)
    # snap yaw to float32 after normalization so files round-trip exactly
    return [Box7(b.x, b.y, b.z, b.l, b.w, b.h, _f32(b.yaw), b.class_id) for b in boxes]


@functools.lru_cache(maxsize=1)
def _reference_rays() -> np.ndarray:
    return ray_directions(DomainSpec(64, beam_fan(64), 720, 4.6, 0.25, (4, 10), 0.0, 0))


def ray_directions(spec: DomainSpec, azimuth_offset: float = 0.0) -> np.ndarray:
    elev = np.asarray(spec.beam_elevations)
    az = azimuth_offset + np.arange(spec.points_per_beam) * (2.0 * math.pi / spec.points_per_beam)
    ce = np.cos(elev)[:, None]
    d = np.stack([ce * np.cos(az)[None, :], ce * np.sin(az)[None, :],
                  np.broadcast_to(np.sin(elev)[:, None], (len(elev), len(az)))], axis=-1)
    return d.reshape(-1, 3)


def _ray_box_hits(dirs: np.ndarray, b: Box7) -> np.ndarray:
    """Entry distance of each ray (from the origin) into box ``b``; inf when missed."""
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    # origin and directions expressed in the box frame
    o = np.array([-(c * b.x + s * b.y), -(-s * b.x + c * b.y), -b.z])
    d = np.stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]], axis=1)
    half = np.array([b.l, b.w, b.h]) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def generate_scene(spec: DomainSpec, rng: np.random.Generator, frame_id: str = "frame",
                   domain: str = "source", max_range: float = 70.0,
                   crop_range=UNIFIED_RANGE) -> Frame:
    """Ray-cast one frame; deterministic for a given generator state."""
    boxes = _sample_objects(spec, rng)
    dirs = ray_directions(spec, azimuth_offset=rng.uniform(0.0, 2.0 * math.pi / spec.points_per_beam))
    t_best = np.full(len(dirs), np.inf)
    owner = np.full(len(dirs), -1, dtype=np.int64)
    down = dirs[:, 2] < 0
    t_best[down] = GROUND_Z / dirs[down, 2]
    for k, b in enumerate(boxes):
        t = _ray_box_hits(dirs, b)
        closer = t < t_best
        t_best[closer] = t[closer]
        owner[closer] = k
    valid = np.isfinite(t_best) & (t_best <= max_range)
    t = t_best[valid] + rng.normal(0.0, 0.02, size=int(valid.sum()))
    pts = dirs[valid] * t[:, None]
    on_object = owner[valid] >= 0
    intensity = np.where(on_object, 0.6, 0.2) + rng.normal(0.0, 0.05, size=len(pts))
    cloud = np.concatenate([pts, np.clip(intensity, 0.0, 1.0)[:, None]], axis=1)
    if spec.dropout_rate > 0:
        cloud = cloud[rng.random(len(cloud)) >= spec.dropout_rate]
    cloud = crop_to_range(cloud.astype(np.float32), crop_range)
    return Frame(frame_id, domain, cloud, boxes)


# --------------------------------------------------------------------- camera


def default_camera(height: int = 64, width: int = 64, fov_deg: float = 90.0):
    """Forward-looking pinhole camera at the sensor origin (intrinsics, extrinsics)."""
    fx = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    fy = (height / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    K = np.array([[fx, 0.0, width / 2.0], [0.0, fy, height / 2.0], [0.0, 0.0, 1.0]])
    # world x forward, y left, z up -> camera x right, y down, z forward
    E = np.eye(4)
    E[:3, :3] = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return K, E


def project(points_world: np.ndarray, intrinsics, extrinsics):
    """World points (N, 3) -> pixel coords (N, 2) and camera depth (N,)."""
    K = np.asarray(intrinsics, dtype=np.float64)
    E = np.asarray(extrinsics, dtype=np.float64)
    cam = points_world @ E[:3, :3].T + E[:3, 3]
    depth = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = (cam @ K.T)[:, :2] / depth[:, None]
    return uv, depth


def unproject(uv: np.ndarray, depth: np.ndarray, intrinsics, extrinsics) -> np.ndarray:
    """Pixel coords (N, 2) at camera depth (N,) -> world points (N, 3)."""
    K = np.asarray(intrinsics, dtype=np.float64)
    E = np.asarray(extrinsics, dtype=np.float64)
    rays = np.concatenate([uv, np.ones((len(uv), 1))], axis=1) @ np.linalg.inv(K).T
    cam = rays * depth[:, None]
    return (cam - E[:3, 3]) @ E[:3, :3]


def _box_corners3d(b: Box7) -> np.ndarray:
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    sx = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * b.l / 2.0
    sy = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * b.w / 2.0
    sz = np.array([-1, -1, -1, -1, 1, 1, 1, 1]) * b.h / 2.0
    return np.stack([b.x + c * sx - s * sy, b.y + s * sx + c * sy, b.z + sz], axis=1)


def render_camera(frame: Frame, intrinsics=None, extrinsics=None, rng: np.random.Generator | None = None,
                  height: int = 64, width: int = 64, noise: float = 0.02) -> CameraFrame:
    """Paint each visible object's projected box with a class/instance colour.

    Channel 0 codes the class, channel 1 the instance, channel 2 falls off with
    distance (a monocular depth cue).  Far objects are painted first so nearer
    ones occlude them.  Background is uniform noise in [0, noise).
    """
    if intrinsics is None or extrinsics is None:
        intrinsics, extrinsics = default_camera(height, width)
    rng = rng if rng is not None else np.random.default_rng(0)
    img = rng.uniform(0.0, noise, size=(height, width, 3))
    order = sorted(range(len(frame.labels)), key=lambda k: -math.hypot(frame.labels[k].x, frame.labels[k].y))
    for k in order:
        b = frame.labels[k]
        uv, depth = project(_box_corners3d(b), intrinsics, extrinsics)
        if (depth <= 0.1).any():
            continue
        u0, v0 = np.floor(uv.min(axis=0)).astype(int)
        u1, v1 = np.ceil(uv.max(axis=0)).astype(int)
        u0, u1 = max(u0, 0), min(u1, width)
        v0, v1 = max(v0, 0), min(v1, height)
        if u0 >= u1 or v0 >= v1:
            continue
        dist = float(np.mean(depth))
        color = np.array([0.5 + 0.1 * b.class_id, 0.3 + 0.5 * ((k * 7) % 11) / 10.0, math.exp(-dist / 30.0)])
        img[v0:v1, u0:u1] = color + rng.uniform(0.0, noise, size=(v1 - v0, u1 - u0, 3))
    return CameraFrame(img.astype(np.float32), intrinsics, extrinsics)


# ------------------------------------------------------------------ file format


def encode_frame(frame: Frame) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    fid = frame.id.encode("utf-8")
    out += struct.pack("<BH", DOMAINS.index(frame.domain), len(fid)) + fid
    pts = np.ascontiguousarray(frame.points, dtype="<f4")
    out += struct.pack("<I", len(pts)) + pts.tobytes()
    out += struct.pack("<I", len(frame.labels))
    if frame.labels:
        lab = np.array([[b.x, b.y, b.z, b.l, b.w, b.h, b.yaw, b.class_id] for b in frame.labels], dtype="<f4")
        out += lab.tobytes()
    if frame.camera is None:
        out += b"\x00"
    else:
        cam = frame.camera
        h, w, _ = cam.features.shape
        out += b"\x01" + struct.pack("<II", h, w)
        out += np.ascontiguousarray(cam.features, dtype="<f4").tobytes()
        out += np.ascontiguousarray(cam.intrinsics, dtype="<f4").tobytes()
        out += np.ascontiguousarray(cam.extrinsics, dtype="<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FrameFormatError(f"truncated while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float32)


def decode_frame(buf: bytes) -> Frame:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FrameFormatError("bad magic", 0)
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FrameVersionError(f"unsupported frame version {version}", 4)
    dom, nid = r.unpack("<BH", "frame header")
    if dom >= len(DOMAINS):
        raise FrameFormatError(f"bad domain code {dom}", r.pos - 3)
    fid = r.take(nid, "frame id").decode("utf-8")
    (n_pts,) = r.unpack("<I", "point count")
    pts = r.floats(4 * n_pts, "points").reshape(n_pts, 4)
    (n_lab,) = r.unpack("<I", "label count")
    lab = r.floats(8 * n_lab, "labels").reshape(n_lab, 8)
    labels = [Box7(*(float(v) for v in row[:7]), int(row[7])) for row in lab]
    (flag,) = r.unpack("<B", "camera flag")
    camera = None
    if flag == 1:
        h, w = r.unpack("<II", "camera size")
        feats = r.floats(h * w * 3, "camera features").reshape(h, w, 3)
        K = r.floats(9, "intrinsics").reshape(3, 3)
        E = r.floats(16, "extrinsics").reshape(4, 4)
        camera = CameraFrame(feats, K, E)
    elif flag != 0:
        raise FrameFormatError(f"bad camera flag {flag}", r.pos - 1)
    if r.pos != len(buf):
        raise FrameFormatError("trailing bytes after frame", r.pos)
    return Frame(fid, DOMAINS[dom], pts, labels, camera)


def save_frame(frame: Frame, path) -> None:
    Path(path).write_bytes(encode_frame(frame))


def load_frame(path) -> Frame:
    return decode_frame(Path(path).read_bytes())


# --------------------------------------------------------------------- manifest


def write_manifest(path, entries) -> None:
    """``entries``: iterable of (domain, frame_path); one tab-separated line each."""
    lines = [f"{dom}\t{p}\n" for dom, p in entries]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path) -> list[tuple[str, Path]]:
    path = Path(path)
    base = path.parent
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        dom, sep, p = line.partition("\t")
        if not sep or dom not in DOMAINS:
            raise ValueError(f"{path}:{lineno}: expected '<source|target><TAB><path>'")
        fp = Path(p)
        out.append((dom, fp if fp.is_absolute() else base / fp))
    return out


def load_manifest_frames(path) -> list[Frame]:
    frames = []
    for _, fp in read_manifest(path):
        try:
            frames.append(load_frame(fp))
        except OSError as err:
            raise OSError(f"{path}: cannot read frame {fp}: {err}") from err
    return frames


# ---------------------------------------------------------------------- datasets


def frame_rng(spec: DomainSpec, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator per (domain seed, frame index, stream); order-free, so parallel-safe."""
    return np.random.default_rng(np.random.SeedSequence([spec.seed, index, stream]))


def make_frame(spec: DomainSpec, index: int, domain: str, with_camera: bool = True, stream: int = 0,
               prefix: str | None = None, image_size: int = 64) -> Frame:
    prefix = domain if prefix is None else prefix
    rng = frame_rng(spec, index, stream)
    frame = generate_scene(spec, rng, f"{prefix}-{index:05d}", domain)
    if with_camera:
        frame.camera = render_camera(frame, rng=rng, height=image_size, width=image_size)
    return frame


def generate_dataset(spec: DomainSpec, count: int, domain: str, with_camera: bool = True,
                     stream: int = 0, prefix: str | None = None, workers: int = 1,
                     image_size: int = 64) -> list[Frame]:
    """``count`` frames; frame k depends only on (spec, k, stream), never on ``workers``."""
    if workers <= 1 or count < 2:
        return [make_frame(spec, k, domain, with_camera, stream, prefix, image_size) for k in range(count)]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(make_frame, spec, k, domain, with_camera, stream, prefix, image_size)
                for k in range(count)]
        return [f.result() for f in futs]


def dataset_stats(frames) -> dict:
    n = len(frames)
    return {"frames": n,
            "mean_points": float(np.mean([len(f.points) for f in frames])) if n else 0.0,
            "mean_objects": float(np.mean([len(f.labels) for f in frames])) if n else 0.0}
