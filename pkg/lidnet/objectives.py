"""
objectives.py — Perceptual losses and the joint denoiser objectives.

The feature extractor T is the detector backbone. The ROI variant pools the
features of both images inside the same top-K proposal boxes, generated from
the denoised image, and compares the pooled P x P maps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torchvision.ops import roi_align

from lidnet.errors import ConfigurationError, ContractError, SchedulingError
from lidnet.networks.boxes import corners_to_xyxy
from lidnet.networks.denoiser import (
    DenoiserParams,
    denoise,
    generator_adversarial_loss,
    reconstruction_loss,
)
from lidnet.networks.detector import Detector, FeatureMap, full_detector_loss, select_top_k

logger = logging.getLogger(__name__)

PERCEPTUAL_MODES = ("roi", "global")


@dataclass
class PooledRoiFeature:
    """Features (d, P, P) pooled from one box."""
    tensor: Tensor
    box: Tensor

    @property
    def pool_size(self) -> int:
        return int(self.tensor.shape[-1])


@dataclass(frozen=True)
class ObjectiveWeights:
    lambda1: float = 5.0   # ROI perceptual
    lambda2: float = 5.0   # detection

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError(f"loss weights must be >= 0, got ({self.lambda1}, {self.lambda2})")


@dataclass
class LossBreakdown:
    reconstruction_or_adversarial: Tensor
    roi_perceptual: Tensor
    detection: Tensor
    total: Tensor

    def as_floats(self) -> dict:
        return {
            "recon_or_adv": float(self.reconstruction_or_adversarial),
            "roi_pl": float(self.roi_perceptual),
            "det": float(self.detection),
            "total": float(self.total),
        }


# ---------------------------------------------------------------------------
# Perceptual losses
# ---------------------------------------------------------------------------

def global_perceptual_loss(extractor: Detector, denoised: Tensor, target: Tensor) -> Tensor:
    """||T(x_hat) - T(y)||_F^2 / (w h d), averaged over the batch."""
    if denoised.shape != target.shape:
        raise ContractError(f"shape mismatch: {tuple(denoised.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(extractor.extract_features(denoised).tensor, extractor.extract_features(target).tensor)


def _usable_box(box: Tensor, image_size: Tuple[int, int]) -> Optional[Tensor]:
    height, width = image_size
    r1 = box[0].clamp(0, height)
    c1 = box[1].clamp(0, width)
    r2 = box[2].clamp(0, height)
    c2 = box[3].clamp(0, width)
    if float(r2 - r1) <= 0 or float(c2 - c1) <= 0:
        return None
    return torch.stack((r1, c1, r2, c2))


def _pool(tensor: Tensor, boxes: List[Tensor], stride: int, pool_size: int) -> Tensor:
    return roi_align(
        tensor,
        [corners_to_xyxy(b) for b in boxes],
        output_size=pool_size,
        spatial_scale=1.0 / stride,
        sampling_ratio=1,
        aligned=True,
    )


def roi_pool(fmap: FeatureMap, box: Tensor, pool_size: int = 7, batch_index: int = 0) -> Optional[PooledRoiFeature]:
    """Bilinear P x P pooling of one corner box; None (with a warning) when the box is degenerate."""
    if pool_size < 1:
        raise ContractError(f"pool size must be >= 1, got {pool_size}")
    clipped = _usable_box(box.to(fmap.tensor.dtype), fmap.image_size)
    if clipped is None:
        logger.warning("Skipping degenerate ROI %s", [round(float(v), 3) for v in box])
        return None
    single = fmap.tensor[batch_index: batch_index + 1]
    pooled = _pool(single, [clipped.unsqueeze(0)], fmap.stride, pool_size)
    return PooledRoiFeature(pooled[0], clipped)


def roi_perceptual_from_features(
    features_hat: FeatureMap,
    features_target: FeatureMap,
    boxes: Sequence[Tensor],
    pool_size: int = 7,
) -> Tensor:
    """Mean over usable boxes of ||pooled(x_hat) - pooled(y)||_F^2 / (P P d), then over images."""
    if features_hat.tensor.shape != features_target.tensor.shape:
        raise ContractError("feature maps of denoised and target images differ in shape")
    usable: List[Tensor] = []
    owners: List[int] = []
    for b, image_boxes in enumerate(boxes):
        kept = []
        for box in image_boxes:
            clipped = _usable_box(box.to(features_hat.tensor.dtype), features_hat.image_size)
            if clipped is None:
                logger.warning("Skipping degenerate ROI %s", [round(float(v), 3) for v in box])
                continue
            kept.append(clipped)
        usable.append(torch.stack(kept) if kept else features_hat.tensor.new_zeros((0, 4)))
        owners.extend([b] * len(kept))

    if not owners:
        logger.warning("No usable ROI proposals; ROI perceptual loss is 0")
        return features_hat.tensor.sum() * 0.0

    pooled_hat = _pool(features_hat.tensor, usable, features_hat.stride, pool_size)
    pooled_target = _pool(features_target.tensor, usable, features_target.stride, pool_size)
    per_box = ((pooled_hat - pooled_target) ** 2).flatten(1).mean(dim=1)
    owner = torch.tensor(owners, device=per_box.device)
    per_image = [per_box[owner == b].mean() for b in sorted(set(owners))]
    return torch.stack(per_image).mean()


def propose_rois(extractor: Detector, denoised: Tensor, top_k: int) -> List[Tensor]:
    """Top-K proposal boxes per image from the RPN pass over the denoised batch."""
    with torch.no_grad():
        fmap = extractor.extract_features(denoised.detach())
        return [select_top_k(p, top_k).boxes for p in extractor.rpn_propose(fmap)]


def roi_perceptual_loss(
    extractor: Detector,
    denoised: Tensor,
    target: Tensor,
    proposals: Sequence[Tensor],
    pool_size: int = 7,
) -> Tensor:
    """ROI perceptual loss with the same ``proposals`` cropping T(x_hat) and T(y)."""
    if denoised.shape != target.shape:
        raise ContractError(f"shape mismatch: {tuple(denoised.shape)} vs {tuple(target.shape)}")
    if len(proposals) != denoised.shape[0]:
        raise ContractError(f"{denoised.shape[0]} images but {len(proposals)} proposal sets")
    return roi_perceptual_from_features(
        extractor.extract_features(denoised),
        extractor.extract_features(target),
        proposals,
        pool_size,
    )


# ---------------------------------------------------------------------------
# Joint objectives
# ---------------------------------------------------------------------------

def _require_frozen(detector: Optional[nn.Module]) -> None:
    if detector is None:
        return
    if any(p.requires_grad for p in detector.parameters()):
        raise SchedulingError("detector parameters must be frozen while the denoiser is optimised")


def _combine(first: Tensor, roi: Tensor, det: Tensor, weights: ObjectiveWeights) -> LossBreakdown:
    total = first + weights.lambda1 * roi + weights.lambda2 * det
    return LossBreakdown(first, roi, det, total)


def total_loss_gan(
    adversarial: Tensor,
    roi_perceptual: Tensor,
    detection: Tensor,
    weights: ObjectiveWeights,
    detector: Optional[nn.Module] = None,
) -> LossBreakdown:
    """E[-D(G(x))] + lambda1 * ROI perceptual + lambda2 * detection."""
    _require_frozen(detector)
    return _combine(adversarial, roi_perceptual, detection, weights)


def total_loss_cnn(
    reconstruction: Tensor,
    roi_perceptual: Tensor,
    detection: Tensor,
    weights: ObjectiveWeights,
    detector: Optional[nn.Module] = None,
) -> LossBreakdown:
    """Reconstruction + lambda1 * ROI perceptual + lambda2 * detection."""
    _require_frozen(detector)
    return _combine(reconstruction, roi_perceptual, detection, weights)


def denoiser_objective(
    denoiser: DenoiserParams,
    detector: Detector,
    ldct: Tensor,
    ndct: Tensor,
    annotations: Sequence[Tuple[Tensor, Tensor]],
    weights: ObjectiveWeights,
    reconstruction: str = "mae",
    perceptual: str = "roi",
    top_k: int = 5,
    pool_size: int = 7,
    seed: Optional[int] = None,
    require_frozen_detector: bool = True,
) -> Tuple[Tensor, LossBreakdown]:
    """Denoise ``ldct`` and evaluate the variant's joint loss; returns (x_hat, breakdown)."""
    if perceptual not in PERCEPTUAL_MODES:
        raise ConfigurationError(f"perceptual mode must be one of {PERCEPTUAL_MODES}, got {perceptual!r}")
    denoised = denoise(denoiser.generator, ldct)
    zero = denoised.sum() * 0.0

    if weights.lambda1 == 0:
        perceptual_term = zero
    elif perceptual == "global":
        perceptual_term = global_perceptual_loss(detector, denoised, ndct)
    else:
        boxes = propose_rois(detector, denoised, top_k)
        perceptual_term = roi_perceptual_loss(detector, denoised, ndct, boxes, pool_size)

    detection_term = zero if weights.lambda2 == 0 else full_detector_loss(detector, denoised, annotations, seed=seed).total

    frozen_check = detector if require_frozen_detector else None
    if denoiser.variant == "gan":
        first = generator_adversarial_loss(denoiser.discriminator, denoised)
        return denoised, total_loss_gan(first, perceptual_term, detection_term, weights, frozen_check)
    first = reconstruction_loss(denoised, ndct, reconstruction)
    return denoised, total_loss_cnn(first, perceptual_term, detection_term, weights, frozen_check)
