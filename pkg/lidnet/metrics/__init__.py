"""Image quality, radiomics and detection metrics."""

from lidnet.metrics.detection import GroundTruthBox, ScoredBox, average_precision, iou
from lidnet.metrics.evaluate import MetricReport, evaluate, evaluate_with_controls
from lidnet.metrics.image_quality import psnr, rmse, ssim
from lidnet.metrics.radiomics import glcm, radiomics_features, roi_feature_mad

__all__ = [
    "GroundTruthBox",
    "MetricReport",
    "ScoredBox",
    "average_precision",
    "evaluate",
    "evaluate_with_controls",
    "glcm",
    "iou",
    "psnr",
    "radiomics_features",
    "rmse",
    "roi_feature_mad",
    "ssim",
]
