"""Split a page into Laplacian bands and put it back together.

The shadow lives almost entirely in the low-pass residual, while the strokes
sit in the fine bands. That is why the network treats the two differently.
"""

import numpy as np

from _pages import page
from deshadow.pyramid import decompose, max_levels, reconstruct

sample = page(128)
print("deepest pyramid for 128x128:", max_levels(128, 128), "levels")

pyr = decompose(sample.shadow, 3)
for i, band in enumerate(pyr.highs):
    print(f"high band {i}: shape {band.shape}, mean |value| {np.abs(band).mean():.4f}")
print(f"low residual: shape {pyr.low.shape}, mean {pyr.low.mean():.4f}")

back = reconstruct(pyr)
print("reconstruction error:", float(np.abs(back - sample.shadow).max()))

# the shadow ratio is smooth, so it barely shows up in the fine bands
shadow_only = decompose(sample.shadow - sample.target * sample.shadow.mean() / sample.target.mean(), 3)
print("energy of shadow difference per band:",
      [round(float(np.square(b).mean()), 6) for b in shadow_only.bands()])
