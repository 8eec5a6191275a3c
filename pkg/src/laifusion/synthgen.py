"""Procedural Sentinel-like scenes with a known LAI ground truth.

Each sample is drawn from its own random stream seeded by
``(seed, stream, index)`` so generation is a pure function of the config and
samples can be produced in any order.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter

from .dataio import YEAR_DAYS, MaskClass, SceneSample, past_cloud_fraction

N_OCTAVES = 4
WATER_LEVEL = 0.05
NON_CLOUDY_MAX = 0.05
CLOUDY_MIN = 0.25


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    tile_size: int = 32
    n_samples: int = 8
    cloud_fraction: float = 0.2
    s1_noise_std: float = 0.1
    temporal_drift: float = 0.1
    # Per-scene additive backscatter bias (soil moisture, calibration); hides the
    # absolute LAI level from radar so the acquisition date carries information.
    s1_offset_std: float = 0.0
    day_of_year: Optional[float] = None
    # Independent sub-stream so several packs can share one user seed.
    stream: int = 0

    def __post_init__(self):
        if not 0.0 <= self.cloud_fraction <= 1.0:
            raise ValueError(f"cloud_fraction must lie in [0, 1], got {self.cloud_fraction}")
        if min(self.s1_noise_std, self.temporal_drift, self.s1_offset_std) < 0:
            raise ValueError("noise, drift and offset scales must be non-negative")
        if self.tile_size < 1 or self.n_samples < 0:
            raise ValueError("tile_size must be positive and n_samples non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def f_vh(lai: np.ndarray) -> np.ndarray:
    return 0.7 * lai + 0.1 * lai**2


def f_vv(lai: np.ndarray) -> np.ndarray:
    return 0.5 * lai + 0.2 * np.sqrt(lai)


def seasonal_amplitude(day_of_year: float) -> float:
    return 0.5 + 0.5 * math.sin(2.0 * math.pi * day_of_year / YEAR_DAYS)


def smooth_noise(rng: np.random.Generator, size: int, cell: int, passes: int = 3) -> np.ndarray:
    """Value noise on a ``cell``-spaced lattice, blurred by repeated box filters."""
    cell = max(1, min(cell, size))
    n = -(-size // cell) + 1
    lattice = rng.standard_normal((n, n))
    field = np.kron(lattice, np.ones((cell, cell)))
    oy, ox = rng.integers(0, cell, size=2)
    field = field[oy : oy + size, ox : ox + size]
    for _ in range(passes):
        field = uniform_filter(field, size=cell, mode="reflect")
    return field


def fractal_field(rng: np.random.Generator, size: int, octaves: int = N_OCTAVES) -> np.ndarray:
    """Octave sum of value noise rescaled to [0, 1]."""
    total = np.zeros((size, size))
    for o in range(octaves):
        cell = max(1, size // 2 ** (o + 1))
        layer = smooth_noise(rng, size, cell)
        sd = layer.std()
        if sd > 0:
            layer = layer / sd
        total += 0.5**o * layer
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.zeros_like(total)


def _signed_field(rng: np.random.Generator, size: int) -> np.ndarray:
    return 2.0 * fractal_field(rng, size, octaves=2) - 1.0


def _top_fraction(field: np.ndarray, fraction: float) -> np.ndarray:
    """Boolean mask marking exactly round(fraction * size) largest entries."""
    k = int(round(fraction * field.size))
    out = np.zeros(field.size, dtype=bool)
    if k > 0:
        order = np.argsort(-field.reshape(-1), kind="stable")
        out[order[:k]] = True
    return out.reshape(field.shape)


def _sample_rng(cfg: SceneConfig, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, cfg.stream, index])


def generate_sample(cfg: SceneConfig, index: int) -> SceneSample:
    rng = _sample_rng(cfg, index)
    size = cfg.tile_size
    day = float(rng.uniform(0.0, YEAR_DAYS)) if cfg.day_of_year is None else float(cfg.day_of_year)

    base = fractal_field(rng, size)
    water = base < WATER_LEVEL
    lai = [base * seasonal_amplitude(day)]
    for _ in range(2):
        drift = cfg.temporal_drift * _signed_field(rng, size)
        lai.append(np.clip(lai[-1] + drift, 0.0, None))
    lai = np.stack(lai)
    lai[:, water] = 0.0

    noise = rng.standard_normal((3, 2, size, size)) * cfg.s1_noise_std
    s1 = np.stack([f_vh(lai), f_vv(lai)], axis=1) + noise
    if cfg.s1_offset_std > 0:
        s1 += rng.normal(0.0, cfg.s1_offset_std)

    masks = np.full((3, size, size), MaskClass.LAND_VEGETATED, dtype=np.uint8)
    masks[:, water] = MaskClass.WATER
    # Past frames share most of their cloud structure ("consistently cloudy").
    spread = min(cfg.cloud_fraction, 1.0 - cfg.cloud_fraction)
    frac = float(rng.uniform(cfg.cloud_fraction - spread, cfg.cloud_fraction + spread))
    common = smooth_noise(rng, size, max(2, size // 4))
    common /= common.std() or 1.0
    for t in range(2):
        own = smooth_noise(rng, size, max(2, size // 4))
        own /= own.std() or 1.0
        masks[t, _top_fraction(0.8 * common + 0.2 * own, frac)] = MaskClass.CLOUD
    target_clouds = smooth_noise(rng, size, max(2, size // 4))
    masks[2, _top_fraction(target_clouds, cfg.cloud_fraction / 4.0)] = MaskClass.CLOUD

    lai_past = lai[:2].copy()
    lai_past[masks[:2] == MaskClass.CLOUD] = 0.0

    return SceneSample(
        s1=s1.astype(np.float32),
        s2_lai_past=lai_past.astype(np.float32),
        masks=masks,
        day_of_year=day,
        lai_target=lai[2].astype(np.float32),
    )


def generate_series(cfg: SceneConfig) -> list[SceneSample]:
    return [generate_sample(cfg, i) for i in range(cfg.n_samples)]


def split_by_cloudiness(samples) -> tuple[list[SceneSample], list[SceneSample]]:
    """Partition into clear (<5% past clouds) and cloudy (>25%); the band between is dropped."""
    non_cloudy, cloudy = [], []
    for s in samples:
        f = past_cloud_fraction(s)
        if f < NON_CLOUDY_MAX:
            non_cloudy.append(s)
        elif f > CLOUDY_MIN:
            cloudy.append(s)
    return non_cloudy, cloudy


def generate_split(cfg: SceneConfig, which: str, count: int, max_tries: int = 100_000) -> list[SceneSample]:
    """Draw samples from ``cfg`` until ``count`` of them fall in split ``which``."""
    out: list[SceneSample] = []
    i = 0
    while len(out) < count:
        if i >= max_tries:
            raise RuntimeError(f"could not collect {count} {which} samples from {cfg}")
        s = generate_sample(cfg, i)
        clear, cloudy = split_by_cloudiness([s])
        if (clear if which == "non_cloudy" else cloudy):
            out.append(s)
        i += 1
    return out


# Streams keep the four packs disjoint under one user seed.
SPLIT_STREAMS = {"train": 0, "non_cloudy": 1, "cloudy": 2, "unique_areas": 3}
CLOUDY_EVAL_FRACTION = 0.5


def generate_packs(
    seed: int,
    tile_size: int = 32,
    n_train: int = 200,
    n_eval: int = 32,
    cloud_fraction: float = 0.2,
    s1_noise_std: float = 0.1,
    temporal_drift: float = 0.1,
    s1_offset_std: float = 0.0,
) -> dict[str, list[SceneSample]]:
    """Training pack plus the three evaluation splits.

    ``non_cloudy`` and ``cloudy`` are drawn from clear and heavily clouded
    configurations and filtered with :func:`split_by_cloudiness`;
    ``unique_areas`` uses the training cloud level on a disjoint stream.
    """
    base = SceneConfig(seed=seed, tile_size=tile_size, n_samples=n_train, cloud_fraction=cloud_fraction,
                       s1_noise_std=s1_noise_std, temporal_drift=temporal_drift, s1_offset_std=s1_offset_std)
    cfg = lambda split, **kw: replace(base, stream=SPLIT_STREAMS[split], **kw)  # noqa: E731
    return {
        "train": generate_series(base),
        "non_cloudy": generate_split(cfg("non_cloudy", cloud_fraction=0.0), "non_cloudy", n_eval),
        "cloudy": generate_split(cfg("cloudy", cloud_fraction=CLOUDY_EVAL_FRACTION), "cloudy", n_eval),
        "unique_areas": generate_series(cfg("unique_areas", n_samples=n_eval)),
    }
