"""Synthetic source and target LiDAR scenes, polar mix-up and the two BEV streams.

Run: python3 demos/02_scenes_mixing_and_bev.py
"""

# %% Two domains: 64 beams with longer cars versus 32 beams with shorter ones
import math

import numpy as np

from cmda import diffcore as dc
from cmda.camerabev import CameraStream
from cmda.geometry import points_in_box
from cmda.lidarbev import VoxelGridSpec, raw_bev, voxel_counts
from cmda.mixup import polar_mix_frames
from cmda.scene import make_frame, source_preset, target_preset

src = make_frame(source_preset(0), 0, "source", image_size=32)
tgt = make_frame(target_preset(1), 0, "target", with_camera=False)
for f in (src, tgt):
    per_box = [len(points_in_box(f.points, b)) for b in f.labels]
    print(f"{f.domain}: {len(f.points)} points, {len(f.labels)} cars, "
          f"mean length {np.mean([b.l for b in f.labels]):.2f} m, points per car {per_box}")

# %% Voxelize onto the shared grid (1.6 m cells, 8 height slices)
grid = VoxelGridSpec((-40.0, -40.0, -2.0, 40.0, 40.0, 4.0), (1.6, 1.6, 0.75))
counts = voxel_counts(src.points, grid)
print("grid", grid.shape, "occupied voxels", int((counts > 0).sum()))
bev = raw_bev(src.points, grid, xy_offsets=True)
print("raw BEV input", bev.shape, "(height slices x channels, flattened)")

# %% Polar mix: a source sector pasted into a target scene
theta, start = math.pi, 0.25
mixed = polar_mix_frames(src, tgt, theta, start)
n_src = int(mixed.point_origin.sum())
print(f"mixed scene: {len(mixed.points)} points ({n_src} from source), labels by origin:",
      sorted({o for _, o in mixed.labels}))

# %% The camera stream lifts image features into the same BEV grid
stream = CameraStream(8, n_bins=16, near=1.0, far=60.0, hidden=16)
with dc.no_grad():
    f_i = stream(src.camera, grid)
cov = stream.coverage(src.camera, grid)
print("camera BEV", f_i.shape, f"covers {100 * cov.mean():.1f}% of BEV cells (the forward frustum)")
