"""
Synthetic masks on a toy face
=============================

Draws one toy face, paints training masks (random colour, jittered outline)
and the fixed evaluation mask on it, and saves the results side by side.
"""

# a toy corpus gives us an aligned face with its five landmarks
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from maskdistill.core import make_rng
from maskdistill.dataio import to_uint8
from maskdistill.maskgen import MaskTemplate, landmark_pixels, mask_for_benchmark, render_mask_details
from maskdistill.toydata import write_toy_dataset

tmp = Path(tempfile.mkdtemp())
dataset = write_toy_dataset(tmp / "toy", num_identities=2, images_per_identity=1, seed=3)
face = dataset.image(0)
print("landmarks (x, y):")
print(np.round(face.landmarks, 1))

# training masks: every draw moves the six vertices by up to 2 px and picks a colour
renders = [render_mask_details(face, MaskTemplate(), make_rng(0, "demo", k)) for k in range(3)]
for r in renders:
    print("mask covers %4.1f%% of the crop, colour %s"
          % (100 * r.coverage.mean(), np.round(r.color, 2)))

# the eyes stay visible, nose and mouth corners are covered
px = landmark_pixels(face.landmarks)
print("landmark covered:", renders[0].coverage[px[:, 0], px[:, 1]])

# evaluation masks keep the outline fixed; only the colour changes with the seed
bench = mask_for_benchmark(face, make_rng(1, "bench"))

tiles = [face] + [r.image for r in renders] + [bench]
strip = np.concatenate([to_uint8(t) for t in tiles], axis=1)
out = Path("mask_rendering.png")
Image.fromarray(strip).resize((strip.shape[1] * 2, strip.shape[0] * 2), Image.NEAREST).save(out)
print("wrote", out.resolve())
