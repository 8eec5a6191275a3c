"""Dual-encoder U-net for pixel-wise LAI regression.

Encoder 1 reads the radar stack, encoder 2 the past LAI maps. Both also see
the one-hot masks (squeezed by a 1x1 conv) and a seasonality embedding
broadcast over the tile. Each encoder ends in a 1x1 head predicting LAI on
its own; the decoder U-net consumes both full-resolution feature maps.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names such
as ``enc1.unet.down0.conv1.w``; checkpoints store exactly that mapping.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import (
    CLASS_COUNT,
    N_PAST,
    N_POLARIZATIONS,
    N_TIMESTAMPS,
    NormStats,
    SceneSample,
    normalize,
    one_hot_masks,
    seasonality_features,
)
from .errors import CheckpointMismatch, ContractViolation, InvalidGeometry, SizeMismatch, TruncatedBlob, VersionMismatch

Params = dict[str, Tensor]

CKPT_VERSION = 1
ENCODERS = ("enc1", "enc2")
PRIMARY_CHANNELS = {"enc1": N_TIMESTAMPS * N_POLARIZATIONS, "enc2": N_PAST}
MASK_CHANNELS_IN = N_TIMESTAMPS * CLASS_COUNT


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 1
    # Equal to base_channels for a feature extractor; anything else adds a 1x1 projection.
    out_channels: int = 16


@dataclass(frozen=True)
class ModelConfig:
    enc_depth: int = 3
    enc_base: int = 16
    dec_depth: int = 2
    dec_base: int = 16
    mask_channels: int = 4
    season_hidden: int = 8

    def encoder_unet(self, which: str) -> UNetConfig:
        cin = PRIMARY_CHANNELS[which] + self.mask_channels + self.season_hidden
        return UNetConfig(self.enc_depth, self.enc_base, cin, self.enc_base)

    def decoder_unet(self) -> UNetConfig:
        return UNetConfig(self.dec_depth, self.dec_base, 2 * self.enc_base, 1)

    def check_tile(self, tile: int) -> None:
        for d in (self.enc_depth, self.dec_depth):
            if tile % 2**d:
                raise InvalidGeometry(f"tile {tile} not divisible by 2**{d}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


# ---------------------------------------------------------------------------
# Parameter shapes and initialization


def _conv_shapes(name: str, cin: int, cout: int, k: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{name}.w", (cout, cin, k, k)), (f"{name}.b", (cout,))]


def unet_shapes(prefix: str, cfg: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    width = [cfg.base_channels * 2**level for level in range(cfg.depth + 1)]
    cin = cfg.in_channels
    for level in range(cfg.depth):
        shapes += _conv_shapes(f"{prefix}.down{level}.conv1", cin, width[level], 3)
        shapes += _conv_shapes(f"{prefix}.down{level}.conv2", width[level], width[level], 3)
        cin = width[level]
    shapes += _conv_shapes(f"{prefix}.mid.conv1", cin, width[cfg.depth], 3)
    shapes += _conv_shapes(f"{prefix}.mid.conv2", width[cfg.depth], width[cfg.depth], 3)
    for level in reversed(range(cfg.depth)):
        shapes += _conv_shapes(f"{prefix}.up{level}.upconv", width[level + 1], width[level], 3)
        shapes += _conv_shapes(f"{prefix}.up{level}.conv1", 2 * width[level], width[level], 3)
        shapes += _conv_shapes(f"{prefix}.up{level}.conv2", width[level], width[level], 3)
    if cfg.out_channels != cfg.base_channels:
        shapes += _conv_shapes(f"{prefix}.out", cfg.base_channels, cfg.out_channels, 1)
    return shapes


def encoder_shapes(which: str, cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes = _conv_shapes(f"{which}.mask_pw", MASK_CHANNELS_IN, cfg.mask_channels, 1)
    shapes += [
        (f"{which}.season.fc1.w", (cfg.season_hidden, 2)),
        (f"{which}.season.fc1.b", (cfg.season_hidden,)),
        (f"{which}.season.fc2.w", (cfg.season_hidden, cfg.season_hidden)),
        (f"{which}.season.fc2.b", (cfg.season_hidden,)),
    ]
    shapes += unet_shapes(f"{which}.unet", cfg.encoder_unet(which))
    shapes += _conv_shapes(f"{which}.head", cfg.enc_base, 1, 1)
    return shapes


def model_shapes(cfg: ModelConfig, parts: Sequence[str] = ("enc1", "enc2", "dec")):
    shapes = []
    for part in parts:
        if part == "dec":
            shapes += unet_shapes("dec.unet", cfg.decoder_unet())
        else:
            shapes += encoder_shapes(part, cfg)
    return shapes


def init_params(
    cfg: ModelConfig,
    seed: int = 0,
    parts: Sequence[str] = ("enc1", "enc2", "dec"),
    dtype=np.float32,
) -> Params:
    """Kaiming fan-in normal weights and zero biases, one RNG stream per part."""
    params: Params = {}
    for part in parts:
        rng = np.random.default_rng([seed, ENCODERS.index(part) if part in ENCODERS else 2])
        for name, shape in model_shapes(cfg, (part,)):
            if name.endswith(".b"):
                arr = np.zeros(shape)
            else:
                fan_in = math.prod(shape[1:])
                arr = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
            params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


def parameter_count(cfg: ModelConfig, parts: Sequence[str] = ("enc1", "enc2", "dec")) -> int:
    return sum(math.prod(s) for _, s in model_shapes(cfg, parts))


def subset(params: Mapping[str, Tensor], prefix: str) -> Params:
    return {k: v for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------------------
# Forward passes


def _conv(p: Mapping[str, Tensor], name: str, x: Tensor, pad: int) -> Tensor:
    return ad.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=1, pad=pad)


def _block(p, name: str, x: Tensor) -> Tensor:
    x = ad.relu(_conv(p, f"{name}.conv1", x, 1))
    return ad.relu(_conv(p, f"{name}.conv2", x, 1))


def _depth(p: Mapping[str, Tensor], prefix: str) -> int:
    d = 0
    while f"{prefix}.down{d}.conv1.w" in p:
        d += 1
    return d


def unet_forward(p: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    depth = _depth(p, prefix)
    h, w = x.shape[2:]
    if h % 2**depth or w % 2**depth:
        raise InvalidGeometry(f"{prefix}: input {h}x{w} not divisible by 2**{depth}")
    skips = []
    for level in range(depth):
        x = _block(p, f"{prefix}.down{level}", x)
        skips.append(x)
        x = ad.max_pool2d(x, 2)
    x = _block(p, f"{prefix}.mid", x)
    for level in reversed(range(depth)):
        x = ad.relu(_conv(p, f"{prefix}.up{level}.upconv", ad.upsample_nearest2x(x), 1))
        x = ad.concat_channels([x, skips[level]])
        x = _block(p, f"{prefix}.up{level}", x)
    if f"{prefix}.out.w" in p:
        x = _conv(p, f"{prefix}.out", x, 0)
    return x


def encoder_forward(
    p: Mapping[str, Tensor],
    primary_input: Tensor,
    masks_onehot: Tensor,
    season: Tensor,
    which: str = "enc1",
) -> tuple[Tensor, Tensor]:
    """Run one encoder; returns (features [N,F,H,W], lai_head [N,1,H,W])."""
    n, cp, h, w = primary_input.shape
    if cp != PRIMARY_CHANNELS[which]:
        raise ContractViolation(f"{which} expects {PRIMARY_CHANNELS[which]} input channels, got {cp}")
    if masks_onehot.shape != (n, MASK_CHANNELS_IN, h, w):
        raise ContractViolation(f"{which}: masks shape {masks_onehot.shape} mismatches input")
    if season.shape != (n, 2):
        raise ContractViolation(f"{which}: season shape {season.shape} != ({n}, 2)")
    m = _conv(p, f"{which}.mask_pw", masks_onehot, 0)
    s = ad.relu(ad.linear(season, p[f"{which}.season.fc1.w"], p[f"{which}.season.fc1.b"]))
    s = ad.linear(s, p[f"{which}.season.fc2.w"], p[f"{which}.season.fc2.b"])
    x = ad.concat_channels([primary_input, m, ad.broadcast_spatial(s, h, w)])
    features = unet_forward(p, f"{which}.unet", x)
    return features, _conv(p, f"{which}.head", features, 0)


def decoder_forward(p: Mapping[str, Tensor], f1: Tensor, f2: Tensor) -> Tensor:
    if f1.shape != f2.shape:
        raise ContractViolation(f"decoder: feature shapes differ {f1.shape} vs {f2.shape}")
    return unet_forward(p, "dec.unet", ad.concat_channels([f1, f2]))


# ---------------------------------------------------------------------------
# Batches


@dataclass
class Batch:
    s1: np.ndarray  # [N, 6, H, W] normalized
    lai_past: np.ndarray  # [N, 2, H, W] normalized
    masks: np.ndarray  # [N, 18, H, W] one-hot
    season: np.ndarray  # [N, 2]
    target: np.ndarray  # [N, 1, H, W] native LAI units
    valid: np.ndarray  # [N, 1, H, W] in {0, 1}

    def __len__(self) -> int:
        return self.target.shape[0]


def make_batch(samples: Sequence[SceneSample], stats: NormStats, dtype=np.float32) -> Batch:
    norm = [normalize(s, stats) for s in samples]
    n = len(norm)
    h = norm[0].tile_size
    return Batch(
        s1=np.stack([s.s1.reshape(-1, h, h) for s in norm]).astype(dtype),
        lai_past=np.stack([s.s2_lai_past for s in norm]).astype(dtype),
        masks=np.stack([one_hot_masks(s.masks) for s in norm]).astype(dtype),
        season=np.array([seasonality_features(s.day_of_year) for s in norm], dtype=dtype).reshape(n, 2),
        target=np.stack([s.lai_target for s in norm])[:, None].astype(dtype),
        valid=np.stack([s.valid for s in norm])[:, None].astype(dtype),
    )


@dataclass(frozen=True)
class InputFlags:
    """Which auxiliary inputs an encoder sees; disabled ones are zeroed."""

    masks: bool = True
    season: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def encoder_inputs(batch: Batch, which: str, flags: InputFlags = InputFlags()):
    primary = batch.s1 if which == "enc1" else batch.lai_past
    masks = batch.masks if flags.masks else np.zeros_like(batch.masks)
    season = batch.season if flags.season else np.zeros_like(batch.season)
    return Tensor(primary), Tensor(masks), Tensor(season)


def encoder_predict(p: Mapping[str, Tensor], batch: Batch, which: str,
                    flags: InputFlags = InputFlags()) -> tuple[Tensor, Tensor]:
    return encoder_forward(p, *encoder_inputs(batch, which, flags), which=which)


def full_forward(
    p: Mapping[str, Tensor],
    batch: Batch,
    flags: Mapping[str, InputFlags] | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (lai_dec, lai_enc1, lai_enc2)."""
    flags = flags or {}
    f1, h1 = encoder_predict(p, batch, "enc1", flags.get("enc1", InputFlags()))
    f2, h2 = encoder_predict(p, batch, "enc2", flags.get("enc2", InputFlags()))
    return decoder_forward(p, f1, f2), h1, h2


# ---------------------------------------------------------------------------
# Checkpoints


def save_params(params: Mapping[str, Tensor | np.ndarray], path, meta: Optional[dict] = None) -> Path:
    """Write a checkpoint directory: ``manifest.json`` plus ``params.bin`` (f32le)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value).astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size * 4
    (path / "params.bin").write_bytes(b"".join(blobs))
    manifest = {"format_version": CKPT_VERSION, "dtype": "f32le", "params": entries, "meta": meta or {}}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint {path} has version {manifest.get('format_version')!r}")
    raw = (path / "params.bin").read_bytes()
    expected = sum(math.prod(e["shape"]) * 4 for e in manifest["params"])
    if len(raw) < expected:
        raise TruncatedBlob("params", expected, len(raw))
    if len(raw) != expected:
        raise SizeMismatch("params", expected, len(raw))
    out = {}
    for e in manifest["params"]:
        count = math.prod(e["shape"])
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=e["offset"])
        out[e["name"]] = arr.astype(np.float32).reshape(e["shape"])
    return out, manifest.get("meta", {})


def load_into(
    params: Params,
    loaded: Mapping[str, np.ndarray],
    prefixes: Optional[Sequence[str]] = None,
    strict: bool = True,
) -> list[str]:
    """Copy ``loaded`` arrays into ``params`` in place; returns the names copied.

    With ``prefixes`` only names under those prefixes are considered on both
    sides, so an encoder-only checkpoint can initialize part of a full model.
    """

    def keep(name: str) -> bool:
        return prefixes is None or any(name.startswith(p + ".") for p in prefixes)

    target = {k for k in params if keep(k)}
    source = {k for k in loaded if keep(k)}
    missing = sorted(target - source)
    unexpected = sorted(source - target)
    bad = sorted(
        f"{k}: checkpoint {tuple(loaded[k].shape)} vs model {params[k].shape}"
        for k in target & source
        if tuple(loaded[k].shape) != params[k].shape
    )
    if bad or (strict and (missing or unexpected)):
        parts = []
        if missing:
            parts.append("missing: " + ", ".join(missing))
        if unexpected:
            parts.append("unexpected: " + ", ".join(unexpected))
        if bad:
            parts.append("shape mismatch: " + "; ".join(bad))
        raise CheckpointMismatch("checkpoint does not fit model (" + " | ".join(parts) + ")",
                                 missing, unexpected, bad)
    copied = sorted(target & source)
    for k in copied:
        params[k].data = np.array(loaded[k], dtype=params[k].dtype)
    return copied
