"""Pixel-wise LAI regression from Sentinel-1/2-like time series with a dual-encoder U-net."""
from . import autodiff, dataio, lossmetrics, model, synthgen, train
from .autodiff import Tensor, grad_check
from .dataio import MaskClass, NormStats, SceneSample, load_tilepack, save_tilepack
from .lossmetrics import LossWeights, MetricsReport, combined_loss, masked_mse, r2, rmse
from .model import ModelConfig, full_forward
from .synthgen import SceneConfig, generate_packs, generate_series
from .train import TrainConfig, finetune_full, mlr_baseline, pretrain_encoder, run_ablations

__version__ = "0.1.0"
