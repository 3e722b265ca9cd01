"""Adaptive level-restricted octree on the graded plate, and its far-field split.

Run: python demos/plate_tree.py [refine_depth]
"""

import sys

import numpy as np

from fmmlu.geometry import make_multiscale_plate
from fmmlu.octree import build_tree, enforce_level_restriction, partition_far_field

depth = int(sys.argv[1]) if len(sys.argv) > 1 else 6
disc = make_multiscale_plate(depth, 4)
diam = disc.patch_diameters
print(f"n = {disc.n}, patch diameter ratio = {diam.max() / diam.min():.0f}")
tree = build_tree(disc.nodes, 40)
print("before level restriction:", tree.stats()["leaves_per_level"])
tree = enforce_level_restriction(tree)
print("after level restriction: ", tree.stats()["leaves_per_level"])
owners = {b: tree.boxes[b].points for b in tree.leaves}
sizes = np.array([[len(p.N), len(p.Q), len(p.P)] for p in
                  (partition_far_field(tree, b, owners) for b in tree.leaves)])
print("mean |N|, |Q|, |P| over leaves:", sizes.mean(axis=0).round(1))
