"""Masked losses, intermediate supervision and pooled RMSE / R² metrics.

Masked pixels are dropped by boolean selection rather than multiplied by
zero, so their values never reach the arithmetic: changing them cannot move
a loss or metric by even one ulp.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import Tensor, make_op
from .errors import AllMaskedBatch, ContractViolation, EmptySplit, UndefinedVariance


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.15

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def masked_mse(pred: Tensor, gt, valid) -> Tensor:
    """Mean of (pred - gt)² over pixels where ``valid`` is non-zero."""
    gt_a, sel = _as_array(gt), _as_array(valid) != 0
    if pred.shape != gt_a.shape or pred.shape != sel.shape:
        raise ContractViolation(f"masked_mse: shapes {pred.shape}, {gt_a.shape}, {sel.shape}")
    count = int(sel.sum())
    if count == 0:
        raise AllMaskedBatch("no valid pixel in batch")
    diff = pred.data[sel] - gt_a[sel].astype(pred.dtype)
    value = np.asarray(np.dot(diff.astype(np.float64), diff) / count, dtype=pred.dtype)
    scale = pred.dtype.type(2.0 / count)

    def backward(g):
        out = np.zeros_like(pred.data)
        out[sel] = (g * scale) * diff
        return (out,)

    return make_op(value, (pred,), backward, "masked_mse")


def combined_loss_terms(gt, lai_dec: Tensor, lai_enc1: Tensor, lai_enc2: Tensor, valid,
                        w: LossWeights = LossWeights()) -> tuple[Tensor, tuple[Tensor, Tensor, Tensor]]:
    """Total loss together with its three unweighted terms (dec, enc1, enc2)."""
    terms = (masked_mse(lai_dec, gt, valid), masked_mse(lai_enc1, gt, valid), masked_mse(lai_enc2, gt, valid))
    return terms[0] + terms[1] * w.alpha + terms[2] * w.beta, terms


def combined_loss(gt, lai_dec: Tensor, lai_enc1: Tensor, lai_enc2: Tensor, valid,
                  w: LossWeights = LossWeights()) -> Tensor:
    """Decoder MSE plus alpha/beta-weighted encoder-head MSEs, one shared mask."""
    return combined_loss_terms(gt, lai_dec, lai_enc1, lai_enc2, valid, w)[0]


def _pooled(pred, gt, valid) -> tuple[np.ndarray, np.ndarray]:
    pred, gt, sel = (np.asarray(_as_array(a)) for a in (pred, gt, valid))
    sel = sel != 0
    if pred.shape != gt.shape or gt.shape != sel.shape:
        raise ContractViolation(f"metric shapes differ: {pred.shape}, {gt.shape}, {sel.shape}")
    return pred[sel].astype(np.float64), gt[sel].astype(np.float64)


def rmse(pred, gt, valid) -> float:
    p, g = _pooled(pred, gt, valid)
    if p.size == 0:
        raise AllMaskedBatch("rmse over zero valid pixels")
    d = p - g
    return math.sqrt(float(np.dot(d, d)) / d.size)


def r2(pred, gt, valid) -> float:
    p, g = _pooled(pred, gt, valid)
    if p.size < 2:
        raise UndefinedVariance("r2 needs at least two valid pixels")
    d = p - g
    c = g - g.mean()
    ss_tot = float(np.dot(c, c))
    if ss_tot == 0.0:
        raise UndefinedVariance("ground truth is constant over valid pixels")
    return 1.0 - float(np.dot(d, d)) / ss_tot


@dataclass
class MetricsRow:
    variant: str
    split: str
    rmse: float
    r2: float
    n_valid_pixels: int


def evaluate_split(predict: Callable[[Sequence], np.ndarray], samples: Sequence, split: str,
                   variant: str = "model", batch_size: int = 16) -> MetricsRow:
    """Pool valid target pixels of a whole split and score ``predict`` on them.

    ``predict`` maps a list of SceneSample to an [N, H, W] (or [N,1,H,W])
    array of LAI predictions in native units.
    """
    if not samples:
        raise EmptySplit(f"split {split!r} is empty")
    preds, gts, valids = [], [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        out = np.asarray(predict(chunk)).reshape(len(chunk), -1)
        preds.append(out)
        gts.append(np.stack([s.lai_target for s in chunk]).reshape(len(chunk), -1))
        valids.append(np.stack([s.valid for s in chunk]).reshape(len(chunk), -1))
    pred, gt, valid = (np.concatenate(a) for a in (preds, gts, valids))
    return MetricsRow(variant, split, rmse(pred, gt, valid), r2(pred, gt, valid), int((valid != 0).sum()))


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    FIELDS = ("variant", "split", "rmse", "r2", "n_valid_pixels")

    def add(self, row: MetricsRow) -> None:
        self.rows.append(row)

    def extend(self, rows: Iterable[MetricsRow]) -> None:
        self.rows.extend(rows)

    def get(self, variant: str, split: str) -> MetricsRow:
        for r in self.rows:
            if r.variant == variant and r.split == split:
                return r
        raise KeyError((variant, split))

    @property
    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.rows))

    @property
    def splits(self) -> list[str]:
        return list(dict.fromkeys(r.split for r in self.rows))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.FIELDS)
        for r in self.rows:
            writer.writerow([r.variant, r.split, repr(float(r.rmse)), repr(float(r.r2)), r.n_valid_pixels])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        reader = csv.DictReader(io.StringIO(text))
        return cls([MetricsRow(d["variant"], d["split"], float(d["rmse"]), float(d["r2"]),
                               int(d["n_valid_pixels"])) for d in reader])

    def table(self) -> str:
        """Human-readable grid: one line per variant, (RMSE, R²) per split."""
        splits = self.splits
        head = f"{'variant':<22}" + "".join(f"{s + ' RMSE':>20}{s + ' R2':>18}" for s in splits)
        lines = [head]
        for v in self.variants:
            cells = []
            for s in splits:
                try:
                    r = self.get(v, s)
                    cells.append(f"{r.rmse:>20.3f}{r.r2:>18.3f}")
                except KeyError:
                    cells.append(f"{'-':>20}{'-':>18}")
            lines.append(f"{v:<22}" + "".join(cells))
        return "\n".join(lines)

    def to_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.rows]
