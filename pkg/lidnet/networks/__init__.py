"""Denoising and detection networks, their losses and checkpoints."""

from lidnet.networks.checkpoint import load_checkpoint, save_checkpoint
from lidnet.networks.denoiser import (
    DenoiserParams,
    Discriminator,
    ResidualGenerator,
    build_denoiser,
    denoise,
    discriminator_loss,
    generator_adversarial_loss,
    reconstruction_loss,
)
from lidnet.networks.detector import (
    Detection,
    DetectionLossBreakdown,
    Detector,
    FeatureMap,
    ProposalSet,
    detection_loss,
    full_detector_loss,
    infer_detections,
    select_top_k,
)
from lidnet.networks.optim import ParameterUpdater

__all__ = [
    "DenoiserParams",
    "Detection",
    "DetectionLossBreakdown",
    "Detector",
    "Discriminator",
    "FeatureMap",
    "ParameterUpdater",
    "ProposalSet",
    "ResidualGenerator",
    "build_denoiser",
    "denoise",
    "detection_loss",
    "discriminator_loss",
    "full_detector_loss",
    "generator_adversarial_loss",
    "infer_detections",
    "load_checkpoint",
    "reconstruction_loss",
    "save_checkpoint",
    "select_top_k",
]
