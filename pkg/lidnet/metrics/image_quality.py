"""
metrics/image_quality.py — PSNR, RMSE and SSIM against the NDCT reference.
"""
from __future__ import annotations

import logging
import math
from typing import NamedTuple, Optional

import numpy as np
from skimage.metrics import mean_squared_error, peak_signal_noise_ratio, structural_similarity

from lidnet.errors import ConfigurationError, ContractError
from lidnet.models.config import SsimConfig

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 200.0
SSIM_TRUNCATE = 3.5


class PsnrValue(NamedTuple):
    db: float
    capped: bool


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    _check_pair(a, b)
    return math.sqrt(mean_squared_error(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, cap: float = PSNR_CAP_DB) -> PsnrValue:
    """10 log10(range^2 / MSE); identical images report ``cap`` with ``capped=True``."""
    _check_pair(a, b)
    if data_range <= 0:
        raise ContractError(f"data_range must be > 0, got {data_range}")
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    if mean_squared_error(a64, b64) == 0:
        return PsnrValue(cap, True)
    value = float(peak_signal_noise_ratio(a64, b64, data_range=data_range))
    if value > cap:
        return PsnrValue(cap, True)
    return PsnrValue(value, False)


def gaussian_window_size(sigma: float) -> int:
    return 2 * int(SSIM_TRUNCATE * sigma + 0.5) + 1


def ssim(a: np.ndarray, b: np.ndarray, cfg: Optional[SsimConfig] = None) -> float:
    """Mean local SSIM with a Gaussian window; 1.0 for identical images."""
    cfg = cfg if cfg is not None else SsimConfig()
    _check_pair(a, b)
    if cfg.window != gaussian_window_size(cfg.sigma):
        raise ConfigurationError(
            f"SSIM window {cfg.window} does not match sigma {cfg.sigma} "
            f"(expected {gaussian_window_size(cfg.sigma)})"
        )
    if cfg.window > min(a.shape):
        raise ContractError(f"SSIM window {cfg.window} is larger than the image {a.shape}")
    return float(structural_similarity(
        np.asarray(a, dtype=np.float64),
        np.asarray(b, dtype=np.float64),
        data_range=cfg.data_range,
        gaussian_weights=True,
        sigma=cfg.sigma,
        use_sample_covariance=False,
        K1=cfg.k1,
        K2=cfg.k2,
    ))
