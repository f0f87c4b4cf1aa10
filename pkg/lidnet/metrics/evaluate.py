"""
metrics/evaluate.py — The full evaluation battery for one denoiser.

Image quality and ROI radiomics are measured against NDCT; detection is
measured by running a frozen NDCT-trained detector on the evaluated images.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from lidnet.errors import ContractError
from lidnet.metrics.detection import (
    GroundTruthBox,
    ScoredBox,
    average_precision,
    best_detection_iou,
)
from lidnet.metrics.image_quality import psnr, rmse, ssim
from lidnet.metrics.radiomics import FEATURES, roi_feature_mad
from lidnet.models.config import EvalConfig
from lidnet.networks.denoiser import denoise
from lidnet.networks.detector import Detection, Detector, export_detections_jsonl, infer_detections
from lidnet.phantoms.base import CtSample
from lidnet.training.schedule import FrozenGuard, freeze

logger = logging.getLogger(__name__)

SOURCES = ("ldct", "ndct")
TABLE_COLUMNS = ["AP-50", "AP-75", "Correlation", "Homogeneity", "Energy", "PSNR", "SSIM", "RMSE"]


@dataclass
class MetricReport:
    name: str
    psnr: float
    ssim: float
    rmse: float
    roi_mad: Dict[str, float]
    ap50: float
    ap75: float
    mean_iou: float = 0.0
    psnr_capped: bool = False
    n_psnr_capped: int = 0
    ap_defined: bool = True
    n_images: int = 0

    def to_row(self) -> Dict[str, Any]:
        """One table row; SSIM stays in [-1, 1] here and is scaled only when formatted."""
        return {
            "name": self.name,
            "AP-50": self.ap50,
            "AP-75": self.ap75,
            "Correlation": self.roi_mad.get("correlation", 0.0),
            "Homogeneity": self.roi_mad.get("homogeneity", 0.0),
            "Energy": self.roi_mad.get("energy", 0.0),
            "PSNR": self.psnr,
            "SSIM": self.ssim,
            "RMSE": self.rmse,
            "Mean-IoU": self.mean_iou,
            "PSNR-capped": self.psnr_capped,
        }

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricReport":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def ground_truths_for(samples: Sequence[CtSample]) -> List[GroundTruthBox]:
    return [
        GroundTruthBox(s.id, a.corners, a.label)
        for s in samples
        for a in s.annotations
    ]


def detect_per_image(
    detector: Detector,
    images: np.ndarray,
    ids: Sequence[str],
    score_thresh: float,
    nms_iou: float,
    batch_size: int = 8,
) -> List[Tuple[str, List[Detection]]]:
    dtype = next(detector.parameters()).dtype
    rows: List[Tuple[str, List[Detection]]] = []
    for start in range(0, len(ids), batch_size):
        batch = torch.from_numpy(np.ascontiguousarray(images[start: start + batch_size])).to(dtype)
        per_image = infer_detections(detector, batch, score_thresh, nms_iou)
        rows.extend(zip(ids[start: start + batch_size], per_image))
    return rows


def _scored(rows: Sequence[Tuple[str, List[Detection]]]) -> List[ScoredBox]:
    return [ScoredBox(sample_id, d.box, d.label, d.score) for sample_id, dets in rows for d in dets]


def detections_for(
    detector: Detector,
    images: np.ndarray,
    ids: Sequence[str],
    score_thresh: float,
    nms_iou: float,
    batch_size: int = 8,
) -> List[ScoredBox]:
    return _scored(detect_per_image(detector, images, ids, score_thresh, nms_iou, batch_size))


@torch.no_grad()
def denoise_images(generator: nn.Module, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    dtype = next(generator.parameters()).dtype
    out = []
    for start in range(0, images.shape[0], batch_size):
        batch = torch.from_numpy(np.ascontiguousarray(images[start: start + batch_size])).to(dtype)
        out.append(denoise(generator, batch).cpu().numpy().astype(np.float32))
    return np.concatenate(out, axis=0)


def evaluate(
    generator: Optional[nn.Module],
    eval_detector: Detector,
    samples: Sequence[CtSample],
    cfg: Optional[EvalConfig] = None,
    name: str = "model",
    source: str = "ldct",
    batch_size: int = 8,
    detections_path: Optional[str] = None,
) -> MetricReport:
    """Metric report for ``generator`` applied to ``source`` images (None = pass-through).

    With ``detections_path`` the evaluation detector's output is also written
    there as JSON lines.
    """
    if not samples:
        raise ContractError("evaluation needs at least one sample")
    if source not in SOURCES:
        raise ContractError(f"source must be one of {SOURCES}, got {source!r}")
    cfg = cfg if cfg is not None else EvalConfig()
    cfg.validate()

    inputs = np.stack([getattr(s, source) for s in samples]).astype(np.float32)
    references = np.stack([s.ndct for s in samples]).astype(np.float32)
    images = denoise_images(generator, inputs, batch_size) if generator is not None else inputs

    psnr_values = [psnr(img, ref, cfg.data_range, cfg.psnr_cap) for img, ref in zip(images, references)]
    ssim_values = [ssim(img, ref, cfg.ssim) for img, ref in zip(images, references)]
    rmse_values = [rmse(img, ref) for img, ref in zip(images, references)]
    n_capped = sum(p.capped for p in psnr_values)
    if n_capped:
        logger.warning("PSNR capped at %.0f dB for %d of %d images in %s", cfg.psnr_cap, n_capped, len(samples), name)

    roi_boxes = [[a.corners for a in s.annotations] for s in samples]
    if any(roi_boxes):
        roi_mad = roi_feature_mad(list(images), list(references), roi_boxes, cfg.glcm)
    else:
        logger.warning("No annotated ROIs in the evaluation set; radiomics MAD reported as 0")
        roi_mad = {feature: 0.0 for feature in FEATURES}

    freeze(eval_detector)
    ids = [s.id for s in samples]
    truths = ground_truths_for(samples)
    with FrozenGuard("evaluation detector", eval_detector):
        per_image = detect_per_image(eval_detector, images, ids, cfg.score_thresh, cfg.nms_iou, batch_size)
    found = _scored(per_image)
    if detections_path:
        count = export_detections_jsonl(detections_path, per_image)
        logger.info("Wrote %d detections to %s", count, detections_path)
    ap50 = average_precision(found, truths, 0.5, cfg.ap_interpolation)
    ap75 = average_precision(found, truths, 0.75, cfg.ap_interpolation)

    report = MetricReport(
        name=name,
        psnr=float(np.mean([p.db for p in psnr_values])),
        ssim=float(np.mean(ssim_values)),
        rmse=float(np.mean(rmse_values)),
        roi_mad=roi_mad,
        ap50=ap50.value,
        ap75=ap75.value,
        mean_iou=best_detection_iou(found, truths),
        psnr_capped=n_capped > 0,
        n_psnr_capped=int(n_capped),
        ap_defined=ap50.defined,
        n_images=len(samples),
    )
    logger.info("Evaluated %s on %d images: AP-50 %.4f, PSNR %.2f dB", name, len(samples), report.ap50, report.psnr)
    return report


def evaluate_with_controls(
    generator: nn.Module,
    eval_detector: Detector,
    samples: Sequence[CtSample],
    cfg: Optional[EvalConfig] = None,
    name: str = "model",
    detections_path: Optional[str] = None,
) -> List[MetricReport]:
    """NDCT-control, LDCT-control and the model row, in that order."""
    return [
        evaluate(None, eval_detector, samples, cfg, name="NDCT-control", source="ndct"),
        evaluate(None, eval_detector, samples, cfg, name="LDCT-control", source="ldct"),
        evaluate(generator, eval_detector, samples, cfg, name=name, source="ldct", detections_path=detections_path),
    ]
