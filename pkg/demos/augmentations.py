"""Robustness augmentations on a toy building.

Run with ``python3 demos/augmentations.py``.
"""
from __future__ import annotations

import numpy as np

from terravox.augment import flip_with_pose, jagged_perturb, normal_drop, roughen
from terravox.geo import look_at, plan_top_pose
from terravox.grid import SparseVoxelGrid, canonicalize

rng = np.random.default_rng(5)

# %% a hollow box: walls facing +-x and +-y, roof facing +z
L = 16
coords, normals = [], []
for x in range(4, 12):
    for y in range(4, 12):
        for z in range(0, 8):
            if z == 7:
                n = (0, 0, 1)
            elif x in (4, 11):
                n = (1 if x == 11 else -1, 0, 0)
            elif y in (4, 11):
                n = (0, 1 if y == 11 else -1, 0)
            else:
                continue
            coords.append((x, y, z))
            normals.append(n)
order = np.lexsort(np.array(coords).T[::-1])
house = SparseVoxelGrid(np.array(coords)[order], np.array(normals, float)[order], L)
print("voxels:", len(house))

# %% jagged edges move each voxel by at most one cell
j = jagged_perturb(house, rng)
print("jagged:", len(j))

# %% roughening blocks out the footprint
r = roughen(house.coords_only(), 3, 2)
print("roughened:", len(r))

# %% normal drop removes one facade; the roof always survives
d = normal_drop(house, 0.9, rng)
roof = house.coords[:, 2] == 7
print("after drop:", len(d), "roof intact:", bool(d.contains(house.coords[roof]).all()))

# %% flips carry camera poses along
poses = plan_top_pose((8.0, 8.0, 0.0))
flipped, fposes = flip_with_pose(house, 0, poses)
print(poses[0].position.round(1), "->", fposes[0].position.round(1))
