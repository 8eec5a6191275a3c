"""Sample schema, input encodings and the TilePack on-disk container.

A TilePack is a directory holding ``manifest.json`` plus one raw
little-endian float32 blob per array field (``s1.bin``, ``s2_lai.bin``,
``masks.bin``, ``target.bin``). Samples are concatenated in manifest order.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DataCorruption,
    DegenerateStatistics,
    SizeMismatch,
    TilePackError,
    TruncatedBlob,
    VersionMismatch,
)

FORMAT_VERSION = 1
DTYPE_TAG = "f32le"
YEAR_DAYS = 365.25
N_TIMESTAMPS = 3
N_POLARIZATIONS = 2
N_PAST = 2
SPLITS = ("train", "non_cloudy", "cloudy", "unique_areas")


class MaskClass(enum.IntEnum):
    NO_DATA = 0
    CLOUD = 1
    CLOUD_SHADOW = 2
    WATER = 3
    LAND_VEGETATED = 4
    LAND_BARE = 5


CLASS_COUNT = len(MaskClass)
INVALID_CLASSES = (MaskClass.NO_DATA, MaskClass.CLOUD, MaskClass.CLOUD_SHADOW)


@dataclass
class SceneSample:
    """One training/evaluation unit at timestamps t-2, t-1, t.

    ``s1`` is [3, 2, H, W] (VH, VV per timestamp), ``s2_lai_past`` is
    [2, H, W] (t-2, t-1), ``masks`` is [3, H, W] class indices, and
    ``lai_target`` is the LAI map at t.
    """

    s1: np.ndarray
    s2_lai_past: np.ndarray
    masks: np.ndarray
    day_of_year: float
    lai_target: np.ndarray

    def __post_init__(self):
        h, w = self.lai_target.shape
        if self.s1.shape != (N_TIMESTAMPS, N_POLARIZATIONS, h, w):
            raise DataCorruption(f"s1 shape {self.s1.shape} does not match tile {h}x{w}")
        if self.s2_lai_past.shape != (N_PAST, h, w):
            raise DataCorruption(f"s2_lai_past shape {self.s2_lai_past.shape} does not match tile")
        if self.masks.shape != (N_TIMESTAMPS, h, w):
            raise DataCorruption(f"masks shape {self.masks.shape} does not match tile")

    @property
    def tile_size(self) -> int:
        return self.lai_target.shape[0]

    @property
    def valid(self) -> np.ndarray:
        """Loss/metric validity of the target frame."""
        return valid_pixel_mask(self.masks[-1])


@dataclass(frozen=True)
class FieldStats:
    mean: float
    std: float


@dataclass(frozen=True)
class NormStats:
    s1: FieldStats = field(default_factory=lambda: FieldStats(0.0, 1.0))
    s2_lai: FieldStats = field(default_factory=lambda: FieldStats(0.0, 1.0))

    def to_dict(self) -> dict:
        return {
            "s1": [self.s1.mean, self.s1.std],
            "s2_lai": [self.s2_lai.mean, self.s2_lai.std],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(FieldStats(*map(float, d["s1"])), FieldStats(*map(float, d["s2_lai"])))

    @classmethod
    def fit(cls, samples: Sequence[SceneSample]) -> "NormStats":
        """Per-field mean/std over a training set, computed in float64."""
        s1 = np.stack([s.s1 for s in samples]).astype(np.float64)
        lai = np.stack([s.s2_lai_past for s in samples]).astype(np.float64)
        return cls(FieldStats(float(s1.mean()), float(s1.std())),
                   FieldStats(float(lai.mean()), float(lai.std())))


def seasonality_features(day_of_year: float) -> tuple[float, float]:
    phase = 2.0 * math.pi * day_of_year / YEAR_DAYS
    return math.sin(phase), math.cos(phase)


def one_hot_masks(masks: np.ndarray) -> np.ndarray:
    """[T, H, W] class indices -> [T*6, H, W] float32 one-hot channels."""
    masks = np.asarray(masks)
    if masks.size and (masks.min() < 0 or masks.max() >= CLASS_COUNT
                       or not np.array_equal(masks, np.round(masks))):
        raise DataCorruption(f"mask values outside 0..{CLASS_COUNT - 1}")
    t, h, w = masks.shape
    idx = masks.astype(np.int64)
    out = (idx[:, None, :, :] == np.arange(CLASS_COUNT)[None, :, None, None])
    return out.reshape(t * CLASS_COUNT, h, w).astype(np.float32)


def valid_pixel_mask(mask_t: np.ndarray) -> np.ndarray:
    """1 where the target-frame class is usable, 0 for no-data/cloud/shadow."""
    return (~np.isin(mask_t, [int(c) for c in INVALID_CLASSES])).astype(np.float32)


def normalize(sample: SceneSample, stats: NormStats) -> SceneSample:
    for name, fs in (("s1", stats.s1), ("s2_lai", stats.s2_lai)):
        if not fs.std > 0:
            raise DegenerateStatistics(f"std of field {name!r} is {fs.std}")
    return SceneSample(
        s1=((sample.s1 - stats.s1.mean) / stats.s1.std).astype(np.float32),
        s2_lai_past=((sample.s2_lai_past - stats.s2_lai.mean) / stats.s2_lai.std).astype(np.float32),
        masks=sample.masks,
        day_of_year=sample.day_of_year,
        lai_target=sample.lai_target,
    )


# ---------------------------------------------------------------------------
# TilePack


def _field_layout(tile: int) -> dict[str, tuple[int, ...]]:
    return {
        "s1": (N_TIMESTAMPS, N_POLARIZATIONS, tile, tile),
        "s2_lai": (N_PAST, tile, tile),
        "masks": (N_TIMESTAMPS, tile, tile),
        "target": (tile, tile),
    }


def _field_array(sample: SceneSample, name: str) -> np.ndarray:
    return {
        "s1": sample.s1,
        "s2_lai": sample.s2_lai_past,
        "masks": sample.masks,
        "target": sample.lai_target,
    }[name]


def save_tilepack(samples: Sequence[SceneSample], path, split: str = "train",
                  tile_size: int | None = None) -> Path:
    """Write ``samples`` as a TilePack directory at ``path``."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    path = Path(path)
    if samples:
        tile_size = samples[0].tile_size
    elif tile_size is None:
        tile_size = 0
    path.mkdir(parents=True, exist_ok=True)
    layout = _field_layout(tile_size)
    for s in samples:
        if s.tile_size != tile_size:
            raise DataCorruption(f"mixed tile sizes {s.tile_size} and {tile_size} in one pack")
    for name in layout:
        if samples:
            blob = np.stack([_field_array(s, name) for s in samples]).astype("<f4")
        else:
            blob = np.zeros(0, dtype="<f4")
        (path / f"{name}.bin").write_bytes(blob.tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": DTYPE_TAG,
        "split": split,
        "tile_size": tile_size,
        "sample_count": len(samples),
        "fields": {k: list(v) for k, v in layout.items()},
        "day_of_year": [float(s.day_of_year) for s in samples],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise TilePackError(f"unreadable manifest in {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(
            f"pack {path} has format_version {manifest.get('format_version')!r}, "
            f"this build reads {FORMAT_VERSION}"
        )
    if manifest.get("dtype") != DTYPE_TAG:
        raise TilePackError(f"unsupported dtype tag {manifest.get('dtype')!r}")
    return manifest


def load_tilepack(path) -> list[SceneSample]:
    path = Path(path)
    manifest = read_manifest(path)
    n, tile = manifest["sample_count"], manifest["tile_size"]
    if len(manifest["day_of_year"]) != n:
        raise TilePackError("day_of_year list length disagrees with sample_count")
    arrays = {}
    for name, shape in _field_layout(tile).items():
        expected = n * math.prod(shape) * 4
        raw = (path / f"{name}.bin").read_bytes()
        if len(raw) < expected:
            raise TruncatedBlob(name, expected, len(raw))
        if len(raw) != expected:
            raise SizeMismatch(name, expected, len(raw))
        arrays[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape((n,) + shape)
    masks = arrays["masks"]
    if masks.size and (masks.min() < 0 or masks.max() >= CLASS_COUNT
                       or not np.array_equal(masks, np.round(masks))):
        raise DataCorruption(f"masks blob in {path} holds non-class values")
    return [
        SceneSample(
            s1=arrays["s1"][i].copy(),
            s2_lai_past=arrays["s2_lai"][i].copy(),
            masks=masks[i].astype(np.uint8),
            day_of_year=float(manifest["day_of_year"][i]),
            lai_target=arrays["target"][i].copy(),
        )
        for i in range(n)
    ]


def past_cloud_fraction(sample: SceneSample) -> float:
    """Fraction of cloud pixels across the two past frames."""
    return float(np.mean(sample.masks[:N_PAST] == MaskClass.CLOUD))
