"""
metrics/detection.py — IoU and VOC-style average precision.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from lidnet.errors import ContractError

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]


class ScoredBox(NamedTuple):
    image_id: str
    box: Box          # corners (r1, c1, r2, c2)
    label: int
    score: float


class GroundTruthBox(NamedTuple):
    image_id: str
    box: Box          # corners (r1, c1, r2, c2)
    label: int


class AveragePrecision(NamedTuple):
    value: float
    defined: bool


def iou_corners(a: Sequence[float], b: Sequence[float]) -> float:
    inter_h = min(a[2], b[2]) - max(a[0], b[0])
    inter_w = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(0.0, inter_h) * max(0.0, inter_w)
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """IoU of two (row, col, width, height) boxes; a zero-area union gives 0."""
    def corners(box: Sequence[float]) -> Box:
        row, col, width, height = box
        return (row, col, row + height, col + width)
    return iou_corners(corners(box_a), corners(box_b))


def _interpolated_area(recall: np.ndarray, precision: np.ndarray, interpolation: str) -> float:
    if interpolation == "11point":
        points = []
        for t in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= t]
            points.append(float(above.max()) if above.size else 0.0)
        return float(np.mean(points))
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def _label_ap(
    detections: List[ScoredBox],
    truths: List[GroundTruthBox],
    iou_threshold: float,
    interpolation: str,
) -> float:
    by_image: Dict[str, List[Box]] = defaultdict(list)
    for gt in truths:
        by_image[gt.image_id].append(gt.box)
    matched = {image_id: [False] * len(boxes) for image_id, boxes in by_image.items()}

    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        det = detections[i]
        candidates = by_image.get(det.image_id, [])
        best, best_iou = -1, 0.0
        for g, gt_box in enumerate(candidates):
            overlap = iou_corners(det.box, gt_box)
            if overlap > best_iou:
                best, best_iou = g, overlap
        if best >= 0 and best_iou >= iou_threshold and not matched[det.image_id][best]:
            matched[det.image_id][best] = True
            tp[rank] = 1
        else:
            fp[rank] = 1

    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / len(truths)
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    return _interpolated_area(recall, precision, interpolation)


def average_precision(
    detections: Sequence[ScoredBox],
    ground_truths: Sequence[GroundTruthBox],
    iou_threshold: float = 0.5,
    interpolation: str = "all",
) -> AveragePrecision:
    """Greedy score-ordered matching per label, AP averaged over labels with ground truth."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ContractError(f"IoU threshold must lie in (0, 1], got {iou_threshold}")
    if interpolation not in ("all", "11point"):
        raise ContractError(f"interpolation must be 'all' or '11point', got {interpolation!r}")
    if not ground_truths:
        logger.warning("No ground-truth boxes; AP is undefined and reported as 0")
        return AveragePrecision(0.0, False)

    labels = sorted({gt.label for gt in ground_truths})
    values = [
        _label_ap(
            [d for d in detections if d.label == label],
            [g for g in ground_truths if g.label == label],
            iou_threshold,
            interpolation,
        )
        for label in labels
    ]
    return AveragePrecision(float(np.mean(values)), True)


def best_detection_iou(detections: Sequence[ScoredBox], ground_truths: Sequence[GroundTruthBox]) -> float:
    """Mean over ground truths of the IoU of the highest-scoring overlapping same-label detection."""
    if not ground_truths:
        return 0.0
    values = []
    for gt in ground_truths:
        best_score, best_iou = -1.0, 0.0
        for det in detections:
            if det.image_id != gt.image_id or det.label != gt.label:
                continue
            overlap = iou_corners(det.box, gt.box)
            if overlap > 0 and det.score > best_score:
                best_score, best_iou = det.score, overlap
        values.append(best_iou)
    return float(np.mean(values))
