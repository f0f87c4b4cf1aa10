"""
phantoms/simulation.py — Image-domain low-dose CT simulation.

Intensity v is mapped to a line-integral attenuation mu = v * mu_max. Detector
counts are drawn as Poisson(n0 * exp(-mu)) plus optional Gaussian electronic
noise, and the noisy attenuation is mapped back to intensity. Lower n0 means
fewer photons and therefore noisier images.
"""
from __future__ import annotations

import logging

import numpy as np

from lidnet.errors import DataError
from lidnet.models.config import SimulationConfig

logger = logging.getLogger(__name__)


def simulate_ldct(ndct: np.ndarray, cfg: SimulationConfig) -> np.ndarray:
    """Return a low-dose counterpart of ``ndct`` (float32, clamped to [0, 1])."""
    cfg.validate()
    ndct = np.asarray(ndct, dtype=np.float64)
    if not np.isfinite(ndct).all():
        raise DataError("simulate_ldct: input image contains non-finite pixels")

    rng = np.random.default_rng(cfg.rng_seed)
    expected = cfg.n0 * np.exp(-np.clip(ndct, 0.0, 1.0) * cfg.mu_max)
    counts = rng.poisson(expected).astype(np.float64)
    if cfg.electronic_noise_sigma > 0:
        counts += rng.normal(0.0, cfg.electronic_noise_sigma, size=counts.shape)

    noisy = -np.log(np.maximum(counts, 1.0) / cfg.n0) / cfg.mu_max
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)
