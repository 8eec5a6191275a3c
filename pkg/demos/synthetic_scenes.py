"""
A look at the synthetic scenes
==============================

Draw a few samples, check how radar tracks LAI, and print a cloud mask.
"""

import numpy as np

from laifusion.dataio import MaskClass, past_cloud_fraction
from laifusion.synthgen import SceneConfig, generate_series, split_by_cloudiness

cfg = SceneConfig(seed=3, tile_size=32, n_samples=40, cloud_fraction=0.3, s1_noise_std=0.1)
samples = generate_series(cfg)

s = samples[0]
print("s1", s.s1.shape, "past lai", s.s2_lai_past.shape, "masks", s.masks.shape)
print(f"day of year {s.day_of_year:.1f}, target LAI range [{s.lai_target.min():.3f}, {s.lai_target.max():.3f}]")

# VH backscatter grows with LAI (plus speckle-like noise).
lai = np.concatenate([x.lai_target.ravel() for x in samples])
vh = np.concatenate([x.s1[2, 0].ravel() for x in samples])
print(f"corr(VH_t, LAI_t) = {np.corrcoef(vh, lai)[0, 1]:.3f}")

# Past-frame cloudiness varies per sample around the configured fraction.
fractions = np.array([past_cloud_fraction(x) for x in samples])
print(f"past cloud fraction: mean {fractions.mean():.3f}, min {fractions.min():.3f}, max {fractions.max():.3f}")
clear, cloudy = split_by_cloudiness(samples)
print(f"{len(clear)} clear and {len(cloudy)} cloudy samples out of {len(samples)}")

# '#' marks cloud, '~' water, '.' everything else, in the most recent past frame.
glyph = {MaskClass.CLOUD: "#", MaskClass.WATER: "~"}
cloudiest = samples[int(fractions.argmax())]
for row in cloudiest.masks[1]:
    print("".join(glyph.get(int(v), ".") for v in row))
