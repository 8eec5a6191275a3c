"""Adam training, the pretrain -> fine-tune protocol, ablations and the MLR baseline."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, TextIO

import numpy as np

from . import autodiff as ad
from . import model as M
from .dataio import NormStats, SceneSample, normalize, one_hot_masks, seasonality_features
from .errors import (
    AllMaskedBatch,
    CheckpointMismatch,
    DegenerateDataset,
    DegenerateFeatures,
    TrainingDivergence,
)
from .lossmetrics import LossWeights, MetricsReport, MetricsRow, combined_loss_terms, evaluate_split, masked_mse, rmse

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr0: float = 0.001
    decay_factor: float = 0.2
    n_decays: int = 2
    batch_size: int = 32
    alpha: float = 0.1
    beta: float = 0.15
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: Optional[int] = None
    model: M.ModelConfig = field(default_factory=M.ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.batch_size < 1 or self.n_decays < 0:
            raise ValueError("batch_size must be >= 1 and n_decays >= 0")
        LossWeights(self.alpha, self.beta)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        if "model" in d and not isinstance(d["model"], M.ModelConfig):
            d["model"] = M.ModelConfig.from_dict(d["model"])
        return cls(**d)


# Paper recipe at desk scale: same optimizer and schedule, fewer epochs, narrower nets.
DESK_MODEL = M.ModelConfig(enc_depth=3, enc_base=8, dec_depth=2, dec_base=8)
DESK_CONFIG = TrainConfig(epochs=12, batch_size=8, model=DESK_MODEL)


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Step decay with ``n_decays`` boundaries equally spaced over the run."""
    bounds = [k * cfg.epochs // (cfg.n_decays + 1) for k in range(1, cfg.n_decays + 1)]
    lr = cfg.lr0
    # Compounded one decay at a time, as a stepped scheduler would.
    for _ in range(sum(b <= epoch for b in bounds)):
        lr *= cfg.decay_factor
    return lr


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def create(cls, params: Mapping[str, ad.Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: Mapping[str, ad.Tensor], grads: Mapping[str, Optional[np.ndarray]],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[Mapping[str, ad.Tensor], AdamState]:
    """Bias-corrected Adam update applied in place; names with no gradient are skipped."""
    state.t += 1
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDivergence(state.t, name)
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    """Parameters plus everything needed to rebuild inputs for them.

    ``kind`` is "encoder" (one branch with its head) or "full".
    """

    kind: str
    params: M.Params
    model: M.ModelConfig
    stats: NormStats
    flags: dict[str, M.InputFlags]
    which: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "which": self.which,
            "model": self.model.to_dict(),
            "stats": self.stats.to_dict(),
            "flags": {k: f.to_dict() for k, f in self.flags.items()},
            **self.extra,
        }


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    return M.save_params(ckpt.params, path, ckpt.meta())


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = M.load_params(path)
    try:
        kind, model_cfg = meta["kind"], M.ModelConfig.from_dict(meta["model"])
        stats = NormStats.from_dict(meta["stats"])
        flags = {k: M.InputFlags(**f) for k, f in meta["flags"].items()}
    except (KeyError, TypeError) as exc:
        raise CheckpointMismatch(f"checkpoint {path} has incomplete metadata: {exc}") from exc
    parts = (meta["which"],) if kind == "encoder" else ("enc1", "enc2", "dec")
    params = M.init_params(model_cfg, parts=parts)
    M.load_into(params, arrays, strict=True)
    extra = {k: v for k, v in meta.items() if k not in ("kind", "which", "model", "stats", "flags")}
    return Checkpoint(kind, params, model_cfg, stats, flags, meta.get("which"), extra)


def predictor(ckpt: Checkpoint) -> Callable[[Sequence[SceneSample]], np.ndarray]:
    """Inference function in native LAI units for a checkpoint."""

    def predict(samples):
        batch = M.make_batch(samples, ckpt.stats)
        with ad.no_grad():
            if ckpt.kind == "encoder":
                _, out = M.encoder_predict(ckpt.params, batch, ckpt.which, ckpt.flags[ckpt.which])
            else:
                out, _, _ = M.full_forward(ckpt.params, batch, ckpt.flags)
        return out.data[:, 0]

    return predict


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class FitResult:
    steps: int
    history: list[dict]
    best_val_rmse: Optional[float] = None
    best_epoch: Optional[int] = None


def _take(batch: M.Batch, idx) -> M.Batch:
    return M.Batch(*(getattr(batch, f)[idx] for f in M.Batch.__dataclass_fields__))


def _fit(
    params: M.Params,
    loss_fn: Callable[[M.Params, M.Batch], tuple[ad.Tensor, dict]],
    data: M.Batch,
    cfg: TrainConfig,
    logfile: Optional[TextIO] = None,
    validate: Optional[Callable[[], float]] = None,
) -> FitResult:
    state = AdamState.create(params)
    history: list[dict] = []
    best = (math.inf, None, None)
    n = len(data)
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        order = np.random.default_rng([cfg.seed, 7919, epoch]).permutation(n)
        used = 0
        for start in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            batch = _take(data, order[start : start + cfg.batch_size])
            for p in params.values():
                p.grad = None
            try:
                loss, terms = loss_fn(params, batch)
            except AllMaskedBatch:
                continue
            loss.backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, state, lr,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            used += 1
            step += 1
            record = {"step": step, "epoch": epoch, "lr": lr, "loss": loss.item(), **terms}
            history.append(record)
            if logfile is not None:
                logfile.write(json.dumps(record) + "\n")
        if used == 0 and not (cfg.max_steps is not None and step >= cfg.max_steps):
            raise DegenerateDataset(f"every batch of epoch {epoch} was fully masked")
        if validate is not None:
            score = validate()
            log.info("epoch %d val_rmse %.5f", epoch, score)
            if score < best[0]:
                best = (score, epoch, {k: p.data.copy() for k, p in params.items()})
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    if best[2] is not None:
        for k, arr in best[2].items():
            params[k].data = arr
    return FitResult(step, history, None if best[1] is None else best[0], best[1])


def _val_fn(ckpt: Checkpoint, val: Optional[Sequence[SceneSample]]):
    if not val:
        return None
    predict = predictor(ckpt)
    gt = np.stack([s.lai_target for s in val])
    valid = np.stack([s.valid for s in val])

    def score():
        preds = np.concatenate([predict(val[i : i + 16]) for i in range(0, len(val), 16)])
        return rmse(preds, gt, valid)

    return score


def pretrain_encoder(
    which: str,
    samples: Sequence[SceneSample],
    cfg: TrainConfig,
    flags: M.InputFlags = M.InputFlags(),
    val: Optional[Sequence[SceneSample]] = None,
    logfile: Optional[TextIO] = None,
    stats: Optional[NormStats] = None,
) -> tuple[Checkpoint, FitResult]:
    """Train one encoder plus its pixel-wise head on masked MSE alone."""
    if which not in M.ENCODERS:
        raise ValueError(f"which must be one of {M.ENCODERS}")
    cfg.model.check_tile(samples[0].tile_size)
    stats = stats or NormStats.fit(samples)
    params = M.init_params(cfg.model, seed=cfg.seed, parts=(which,))
    ckpt = Checkpoint("encoder", params, cfg.model, stats, {which: flags}, which,
                      {"train_config": cfg.to_dict()})
    data = M.make_batch(samples, stats)

    def loss_fn(p, batch):
        _, head = M.encoder_predict(p, batch, which, flags)
        loss = masked_mse(head, batch.target, batch.valid)
        return loss, {"loss_dec": None, "loss_enc1": None, "loss_enc2": None,
                      f"loss_{which}": loss.item()}

    result = _fit(params, loss_fn, data, cfg, logfile, _val_fn(ckpt, val))
    return ckpt, result


def assemble_full(enc1: Checkpoint, enc2: Checkpoint, cfg: TrainConfig) -> Checkpoint:
    """Full model with encoders copied from checkpoints and a fresh decoder."""
    for c, which in ((enc1, "enc1"), (enc2, "enc2")):
        if c.kind != "encoder" or c.which != which:
            raise CheckpointMismatch(f"expected an {which} encoder checkpoint, got kind={c.kind} which={c.which}")
        if c.model != cfg.model:
            raise CheckpointMismatch(
                f"{which} checkpoint model config {c.model.to_dict()} != training config {cfg.model.to_dict()}"
            )
    if enc1.stats != enc2.stats:
        raise CheckpointMismatch("encoder checkpoints were trained with different normalization statistics")
    params = M.init_params(cfg.model, seed=cfg.seed)
    for c in (enc1, enc2):
        M.load_into(params, {k: p.data for k, p in c.params.items()}, prefixes=(c.which,), strict=True)
    flags = {"enc1": enc1.flags["enc1"], "enc2": enc2.flags["enc2"]}
    return Checkpoint("full", params, cfg.model, enc1.stats, flags, None, {"train_config": cfg.to_dict()})


def finetune_full(
    enc1: Checkpoint,
    enc2: Checkpoint,
    samples: Sequence[SceneSample],
    cfg: TrainConfig,
    val: Optional[Sequence[SceneSample]] = None,
    logfile: Optional[TextIO] = None,
) -> tuple[Checkpoint, FitResult]:
    """End-to-end training of the assembled model under intermediate supervision."""
    ckpt = assemble_full(enc1, enc2, cfg)
    cfg.model.check_tile(samples[0].tile_size)
    data = M.make_batch(samples, ckpt.stats)
    weights = cfg.weights

    def loss_fn(p, batch):
        dec, h1, h2 = M.full_forward(p, batch, ckpt.flags)
        total, terms = combined_loss_terms(batch.target, dec, h1, h2, batch.valid, weights)
        return total, {"loss_dec": terms[0].item(), "loss_enc1": terms[1].item(), "loss_enc2": terms[2].item()}

    result = _fit(ckpt.params, loss_fn, data, cfg, logfile, _val_fn(ckpt, val))
    return ckpt, result


# ---------------------------------------------------------------------------
# Ablations


@dataclass(frozen=True)
class Variant:
    name: str
    which: Optional[str]  # None for the full model
    flags: M.InputFlags = M.InputFlags()


VARIANTS = (
    Variant("S1", "enc1", M.InputFlags(masks=False, season=False)),
    Variant("S1+masks", "enc1", M.InputFlags(masks=True, season=False)),
    Variant("S1+masks+seas", "enc1", M.InputFlags(masks=True, season=True)),
    Variant("S2+masks", "enc2", M.InputFlags(masks=True, season=False)),
    Variant("S2+masks+seas", "enc2", M.InputFlags(masks=True, season=True)),
    Variant("All", None),
)
EVAL_SPLITS = ("non_cloudy", "cloudy", "unique_areas")


def run_ablations(
    train: Sequence[SceneSample],
    evals: Mapping[str, Sequence[SceneSample]],
    cfg: TrainConfig,
    val: Optional[Sequence[SceneSample]] = None,
    log_dir=None,
) -> tuple[MetricsReport, dict[str, Checkpoint]]:
    """Train and score the six input/architecture variants.

    The full model is fine-tuned from the two "+masks+seas" encoders, as in
    the two-step protocol.
    """
    stats = NormStats.fit(train)
    report = MetricsReport()
    ckpts: dict[str, Checkpoint] = {}
    log_dir = Path(log_dir) if log_dir is not None else None
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
    for v in VARIANTS:
        logfile = open(log_dir / f"{v.name}.log", "w") if log_dir is not None else None
        try:
            if v.which is None:
                ckpt, _ = finetune_full(ckpts["S1+masks+seas"], ckpts["S2+masks+seas"], train, cfg, val, logfile)
            else:
                ckpt, _ = pretrain_encoder(v.which, train, cfg, v.flags, val, logfile, stats)
        finally:
            if logfile is not None:
                logfile.close()
        ckpts[v.name] = ckpt
        predict = predictor(ckpt)
        for split in EVAL_SPLITS:
            if split in evals:
                report.add(evaluate_split(predict, evals[split], split, v.name))
        log.info("variant %s done", v.name)
    return report, ckpts


# ---------------------------------------------------------------------------
# Per-pixel multi-linear regression


MLR_FEATURES = 6 + 2 + 18 + 2 + 1


def pixel_features(samples: Sequence[SceneSample], stats: NormStats) -> np.ndarray:
    """[N*H*W, 29] design matrix: S1, past LAI, mask one-hots, sin, cos, bias."""
    rows = []
    for s in samples:
        z = normalize(s, stats)
        h = s.tile_size
        season = np.array(seasonality_features(s.day_of_year))
        cols = np.concatenate([
            z.s1.reshape(6, -1).astype(np.float64),
            z.s2_lai_past.reshape(2, -1).astype(np.float64),
            one_hot_masks(s.masks).reshape(18, -1).astype(np.float64),
            np.repeat(season[:, None], h * h, axis=1),
            np.ones((1, h * h)),
        ])
        rows.append(cols.T)
    return np.concatenate(rows)


def fit_least_squares(x: np.ndarray, y: np.ndarray, jitter: float = 1e-8) -> np.ndarray:
    """Normal-equation OLS with a small ridge term on the diagonal."""
    xtx = x.T @ x + jitter * np.eye(x.shape[1])
    try:
        coef = np.linalg.solve(xtx, x.T @ y)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFeatures(f"normal equations are singular: {exc}") from exc
    if not np.all(np.isfinite(coef)):
        raise DegenerateFeatures("least-squares solution is not finite")
    return coef


@dataclass
class MLRModel:
    coef: np.ndarray
    stats: NormStats

    def predict(self, samples: Sequence[SceneSample]) -> np.ndarray:
        h = samples[0].tile_size
        return (pixel_features(samples, self.stats) @ self.coef).reshape(len(samples), h, h)


def mlr_baseline(
    train: Sequence[SceneSample], evals: Mapping[str, Sequence[SceneSample]], variant: str = "MLR"
) -> tuple[MetricsReport, MLRModel]:
    stats = NormStats.fit(train)
    x = pixel_features(train, stats)
    y = np.concatenate([s.lai_target.reshape(-1) for s in train]).astype(np.float64)
    sel = np.concatenate([s.valid.reshape(-1) for s in train]) != 0
    model = MLRModel(fit_least_squares(x[sel], y[sel]), stats)
    report = MetricsReport()
    for split in EVAL_SPLITS:
        if split in evals:
            report.add(evaluate_split(model.predict, evals[split], split, variant))
    return report, model


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
