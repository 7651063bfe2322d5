"""
Kanizsa stimuli and their perturbations
=======================================

Build one valid triangle by hand, break it in each of the three ways
the datasets use, and save the renders side by side.
"""

import math
import sys

import numpy as np
from PIL import Image

from kanizsa import (Point2, RasterConfig, TrianglePose, make_valid, oracle_is_valid,
                     perturb_angle, perturb_offset, perturb_rot, rasterize)
from kanizsa.geometry import boundary_misalignment

out = sys.argv[1] if len(sys.argv) > 1 else "stimuli.png"

# a valid figure: every mouth edge points at a neighbouring disc
pose = TrianglePose(Point2(0.5, 0.5), 0.3, math.pi / 2)
valid = make_valid(pose, r_ratio=0.21)

# the three families, each with a moderate perturbation
broken = {
    "offs": perturb_offset(valid, 0, 0.12, +1),
    "angle": perturb_angle(valid, 1, math.radians(20)),
    "rot": perturb_rot(valid, (2,), (math.radians(45),)),
}

for name, stim in [("valid", valid), *broken.items()]:
    err = math.degrees(boundary_misalignment(stim))
    print(f"{name:6s} oracle_valid={oracle_is_valid(stim)!s:5s} worst edge misalignment {err:5.1f} deg")

cfg = RasterConfig(128, 128, supersample=8)
tiles = [rasterize(s, cfg).to_array() for s in (valid, *broken.values())]
sep = np.full((128, 4), 128, np.uint8)
strip = np.hstack([t for tile in tiles for t in (tile, sep)][:-1])
Image.fromarray(strip).save(out)
print("wrote", out)
