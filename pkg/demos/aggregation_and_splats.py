"""Fuse per-view features onto voxels, then decode and export splats.

Run with ``python3 demos/aggregation_and_splats.py``; writes ``demo_splats.ply``
to the working directory.
"""
from __future__ import annotations

import numpy as np

from terravox.aggregate import ViewSample, scatter_aggregate
from terravox.grid import canonicalize
from terravox.gsplat import decode_primitives, export_ply, read_ply

rng = np.random.default_rng(0)

# %% eight voxels seen by two 4x4 views; every pixel hits one voxel
voxels = canonicalize(np.array([(x, y, 0) for x in range(4) for y in range(2)]), resolution=4, voxel_size=0.56)
n = len(voxels)
views = []
for value in (1.0, 3.0):
    views.append(ViewSample(
        features=np.full((4, 4, 2), value),
        depth=rng.uniform(0.0, 1.5, (4, 4)),
        index=rng.integers(0, n, (4, 4)),
        normals=np.tile([0.0, 0.0, 1.0], (4, 4, 1)),
        view_dirs=np.tile([0.0, 0.0, 1.0], (4, 4, 1)),
    ))
feats = scatter_aggregate(views, n)
# each voxel gets a weighted mix of the two views' values
print(np.round(feats[:, 0], 3))

# %% decode 16 primitives per voxel from raw parameters
raw = rng.standard_normal((n, 16, 23))
prims = decode_primitives(raw, voxels)
print(len(prims), "primitives; opacity range", prims.opacity.min().round(3), prims.opacity.max().round(3))
print("max offset from center:", np.abs(prims.position - np.repeat((voxels.coords + 0.5) * 0.56, 16, 0)).max())

# %% PLY export
export_ply(prims, "demo_splats.ply")
print("read back", len(read_ply("demo_splats.ply")), "vertices")
