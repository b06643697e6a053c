"""
Where JPEG keeps signal
=======================

Per-frequency fraction of luma DCT magnitude that survives quantization,
averaged over all 8x8 blocks, then summarized by zone (u + v = 0, 1-2,
3-9, 10+).
"""

import numpy as np
from skimage import data

from jpegrad.metrics import dct_survival_heatmap, zone_survival

img = data.astronaut().astype(np.float32) / 255

for qf in (50, 75, 90):
    heat = dct_survival_heatmap(img, qf)
    z = zone_survival(heat)
    print(f"qf={qf}: dc {z.dc:.3f}  low {z.low:.3f}  mid {z.mid:.3f}  high {z.high:.3f}")

# the qf=50 grid, rows u, columns v
np.set_printoptions(precision=2, suppress=True)
print(dct_survival_heatmap(img, 50).grid)
