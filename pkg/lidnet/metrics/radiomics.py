"""
metrics/radiomics.py — GLCM texture features inside lesion ROIs.

ROIs are quantised per ROI with min-max binning into ``n_levels`` grey
levels, so features are invariant to an intensity offset.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from skimage.feature import graycomatrix, graycoprops

from lidnet.errors import ContractError
from lidnet.models.config import GlcmConfig

logger = logging.getLogger(__name__)

FEATURES = ("correlation", "homogeneity", "energy")


@dataclass
class RadiomicsFeatures:
    correlation: float
    homogeneity: float
    energy: float
    degenerate_correlation: bool = False

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in FEATURES}


def quantize(roi: np.ndarray, n_levels: int) -> np.ndarray:
    """floor((v - min) / (max - min) * L), clipped to L - 1; a constant ROI maps to 0."""
    values = np.asarray(roi, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    levels = np.floor((values - lo) / (hi - lo) * n_levels)
    return np.clip(levels, 0, n_levels - 1).astype(np.uint8)


def _offset(distance: int, angle_deg: float) -> tuple:
    theta = math.radians(angle_deg)
    return int(round(math.sin(theta) * distance)), int(round(math.cos(theta) * distance))


def glcm(roi: np.ndarray, cfg: Optional[GlcmConfig] = None) -> np.ndarray:
    """Co-occurrence matrices, shape (L, L, n_distances, n_angles)."""
    cfg = cfg if cfg is not None else GlcmConfig()
    cfg.validate()
    roi = np.asarray(roi)
    if roi.ndim != 2:
        raise ContractError(f"ROI must be 2-D, got shape {roi.shape}")
    for distance in cfg.distances:
        for angle in cfg.angles:
            dr, dc = _offset(distance, angle)
            if roi.shape[0] <= abs(dr) or roi.shape[1] <= abs(dc):
                raise ContractError(
                    f"ROI {roi.shape} too small for offset (distance={distance}, angle={angle}deg)"
                )
    return graycomatrix(
        quantize(roi, cfg.n_levels),
        distances=list(cfg.distances),
        angles=[math.radians(a) for a in cfg.angles],
        levels=cfg.n_levels,
        symmetric=cfg.symmetric,
        normed=cfg.normalize,
    )


def _homogeneity(matrix: np.ndarray) -> float:
    """Mean over slices of sum p / (1 + |i - j|)."""
    levels = matrix.shape[0]
    p = matrix.astype(np.float64)
    p = p / np.maximum(p.sum(axis=(0, 1), keepdims=True), 1e-300)
    i, j = np.ogrid[:levels, :levels]
    weights = 1.0 / (1.0 + np.abs(i - j))
    return float(np.mean(np.tensordot(weights, p, axes=([0, 1], [0, 1]))))


def _has_flat_marginal(matrix: np.ndarray) -> bool:
    levels = matrix.shape[0]
    idx = np.arange(levels, dtype=np.float64)
    for d in range(matrix.shape[2]):
        for a in range(matrix.shape[3]):
            p = matrix[:, :, d, a].astype(np.float64)
            total = p.sum()
            if total <= 0:
                return True
            p = p / total
            mu_i = np.sum(idx * p.sum(axis=1))
            var_i = np.sum((idx - mu_i) ** 2 * p.sum(axis=1))
            mu_j = np.sum(idx * p.sum(axis=0))
            var_j = np.sum((idx - mu_j) ** 2 * p.sum(axis=0))
            if var_i < 1e-15 or var_j < 1e-15:
                return True
    return False


def radiomics_features(roi: np.ndarray, cfg: Optional[GlcmConfig] = None) -> RadiomicsFeatures:
    """energy = sum p^2, homogeneity = sum p / (1 + |i-j|), correlation; averaged over offsets."""
    matrix = glcm(roi, cfg)
    degenerate = _has_flat_marginal(matrix)
    if degenerate:
        logger.warning("GLCM marginal has zero variance; correlation set to 1 for that offset")
    return RadiomicsFeatures(
        correlation=float(np.mean(graycoprops(matrix, "correlation"))),
        homogeneity=_homogeneity(matrix),
        energy=float(np.mean(graycoprops(matrix, "ASM"))),
        degenerate_correlation=degenerate,
    )


def crop_roi(image: np.ndarray, box: Sequence[float]) -> np.ndarray:
    """Pixels covered by a corner box, expanded outward to whole pixels."""
    height, width = image.shape
    r1 = max(0, int(math.floor(box[0])))
    c1 = max(0, int(math.floor(box[1])))
    r2 = min(height, int(math.ceil(box[2])))
    c2 = min(width, int(math.ceil(box[3])))
    if r2 <= r1 or c2 <= c1:
        raise ContractError(f"empty ROI for box {list(box)}")
    return image[r1:r2, c1:c2]


def roi_feature_mad(
    denoised_set: Sequence[np.ndarray],
    ndct_set: Sequence[np.ndarray],
    boxes: Sequence[Sequence[Sequence[float]]],
    cfg: Optional[GlcmConfig] = None,
) -> Dict[str, float]:
    """Per-feature mean over ROIs of |f(denoised ROI) - f(NDCT ROI)|."""
    if not (len(denoised_set) == len(ndct_set) == len(boxes)):
        raise ContractError("denoised images, NDCT images and box lists must pair up")
    diffs: Dict[str, list] = {name: [] for name in FEATURES}
    for denoised, clean, image_boxes in zip(denoised_set, ndct_set, boxes):
        for box in image_boxes:
            fd = radiomics_features(crop_roi(denoised, box), cfg).as_dict()
            fc = radiomics_features(crop_roi(clean, box), cfg).as_dict()
            for name in FEATURES:
                diffs[name].append(abs(fd[name] - fc[name]))
    if not diffs["energy"]:
        raise ContractError("radiomics MAD needs at least one ROI")
    return {name: float(np.mean(values)) for name, values in diffs.items()}
