"""
Ablation table on synthetic data
================================

The six input/architecture variants plus the per-pixel MLR baseline, scored
on clear, cloudy and unseen-area splits. Uses the same synthetic world as the
acceptance suite (noisy, offset radar; drifting LAI) with one seed.
Expect a few minutes on one core.
"""

from laifusion import train as T
from laifusion.synthgen import generate_packs

packs = generate_packs(seed=0, tile_size=32, n_train=200, n_eval=24, cloud_fraction=0.2,
                       s1_noise_std=0.25, temporal_drift=0.25, s1_offset_std=0.2)
cfg = T.with_overrides(T.DESK_CONFIG, epochs=10)

report, _ = T.run_ablations(packs["train"], packs, cfg, val=packs["non_cloudy"])
mlr, _ = T.mlr_baseline(packs["train"], packs)
report.extend(mlr.rows)
print(report.table())
