"""Finite-difference audit of every differentiable op and of a reduced model."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tensor
from .dataio import MaskClass, SceneSample
from .lossmetrics import LossWeights, combined_loss, masked_mse

TOLERANCE = 1e-4
EPS = 1e-6


def _away_from_zero(x: np.ndarray, margin: float) -> np.ndarray:
    return x + np.where(x >= 0, margin, -margin)


def _projected(op: Callable[..., Tensor], proj: np.ndarray) -> Callable[..., Tensor]:
    """Scalarize an op as sum(op(...) * proj) so every output element matters."""
    return lambda *xs: (op(*xs) * Tensor(proj)).sum()


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    def t(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    def proj(*shape):
        return rng.standard_normal(shape)

    cases = {}
    cases["conv2d"] = (
        _projected(lambda x, w, b: ad.conv2d(x, w, b, stride=1, pad=1), proj(2, 3, 5, 5)),
        [t(2, 2, 5, 5), t(3, 2, 3, 3), t(3)],
    )
    cases["conv2d_strided"] = (
        _projected(lambda x, w, b: ad.conv2d(x, w, b, stride=2, pad=0), proj(1, 2, 2, 2)),
        [t(1, 3, 6, 6), t(2, 3, 3, 3), t(2)],
    )
    cases["max_pool2d"] = (_projected(lambda x: ad.max_pool2d(x, 2), proj(2, 2, 2, 2)), [t(2, 2, 4, 4)])
    cases["upsample_nearest2x"] = (_projected(ad.upsample_nearest2x, proj(1, 2, 6, 6)), [t(1, 2, 3, 3)])
    x = rng.standard_normal((3, 7))
    cases["relu"] = (
        _projected(ad.relu, proj(3, 7)),
        [Tensor(_away_from_zero(x, 2 * EPS + 1e-3), requires_grad=True)],
    )
    cases["linear"] = (_projected(ad.linear, proj(4, 3)), [t(4, 5), t(3, 5), t(3)])
    cases["concat_channels"] = (
        _projected(lambda a, b: ad.concat_channels([a, b]), proj(2, 5, 3, 3)),
        [t(2, 2, 3, 3), t(2, 3, 3, 3)],
    )
    cases["broadcast_spatial"] = (_projected(lambda v: ad.broadcast_spatial(v, 3, 4), proj(2, 3, 3, 4)), [t(2, 3)])
    cases["elementwise"] = (lambda a, b: (a * b + a * a - b).sum(), [t(3, 4), t(3, 4)])
    gt = rng.standard_normal((2, 1, 4, 4))
    valid = (rng.random((2, 1, 4, 4)) > 0.3).astype(float)
    valid[0, 0, 0, 0] = 1.0
    cases["masked_mse"] = (lambda p: masked_mse(p, gt, valid), [t(2, 1, 4, 4)])
    return cases


def reduced_model_case(seed: int, tile: int = 8):
    """Depth-1 model, tiny widths, float64: combined loss as a function of all parameters."""
    cfg = M.ModelConfig(enc_depth=1, enc_base=2, dec_depth=1, dec_base=2, mask_channels=2, season_hidden=2)
    params = M.init_params(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 1])
    for name, p in params.items():
        if name.endswith(".b"):
            p.data = 0.1 * rng.standard_normal(p.shape)
    samples = []
    for _ in range(2):
        masks = rng.choice([MaskClass.LAND_VEGETATED, MaskClass.WATER, MaskClass.CLOUD],
                           size=(3, tile, tile), p=[0.6, 0.2, 0.2]).astype(np.uint8)
        samples.append(SceneSample(
            s1=rng.standard_normal((3, 2, tile, tile)).astype(np.float32),
            s2_lai_past=rng.random((2, tile, tile)).astype(np.float32),
            masks=masks,
            day_of_year=float(rng.uniform(0, 365)),
            lai_target=rng.random((tile, tile)).astype(np.float32),
        ))
    from .dataio import NormStats

    batch = M.make_batch(samples, NormStats(), dtype=np.float64)
    names = list(params)
    weights = LossWeights(0.1, 0.15)

    def f(*tensors):
        p = dict(zip(names, tensors))
        dec, h1, h2 = M.full_forward(p, batch)
        return combined_loss(batch.target, dec, h1, h2, batch.valid, weights)

    return f, [params[n] for n in names]


def run_gradcheck(seeds: int = 10, model_probes: int = 4) -> dict[str, float]:
    """Worst relative error per check over ``seeds`` random draws."""
    worst: dict[str, float] = {}
    for seed in range(seeds):
        rng = np.random.default_rng([seed, 0])
        for name, (f, inputs) in _op_cases(rng).items():
            err = ad.grad_check(f, inputs, eps=EPS)
            worst[name] = max(worst.get(name, 0.0), err)
        f, inputs = reduced_model_case(seed)
        err = ad.grad_check(f, inputs, eps=EPS, max_elements=model_probes, seed=seed)
        worst["model_combined_loss"] = max(worst.get("model_combined_loss", 0.0), err)
    return worst
