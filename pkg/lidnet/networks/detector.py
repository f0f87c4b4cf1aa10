"""
networks/detector.py — Compact two-stage detector.

Backbone H (residual CNN, stride 8), a region proposal network over anchors,
and ROI heads S1 (class probabilities) / S2 (per-class box deltas). The
backbone doubles as the feature extractor T of the perceptual losses.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torchvision.ops import roi_align

from lidnet.errors import ContractError
from lidnet.models.config import DetectorConfig
from lidnet.networks.boxes import (
    assign_targets,
    clip_boxes,
    corners_to_rcwh,
    corners_to_xyxy,
    decode_deltas,
    make_anchors,
    non_max_suppression,
    sample_boxes,
)
from lidnet.runs import atomic_write_text

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass
class FeatureMap:
    """Backbone output (B, d, h, w); ``stride`` input pixels per cell."""
    tensor: Tensor
    stride: int
    image_size: Tuple[int, int]

    @property
    def size(self) -> Tuple[int, int]:
        return int(self.tensor.shape[-2]), int(self.tensor.shape[-1])

    @property
    def channels(self) -> int:
        return int(self.tensor.shape[1])


@dataclass
class ProposalSet:
    """Proposals of one image: corner boxes (M, 4) and objectness scores (M,)."""
    boxes: Tensor
    scores: Tensor

    def __len__(self) -> int:
        return int(self.boxes.shape[0])


class Detection(NamedTuple):
    box: Tuple[float, float, float, float]   # corners (r1, c1, r2, c2)
    label: int
    score: float


@dataclass
class DetectionLossBreakdown:
    rpn_objectness: Tensor
    rpn_box: Tensor
    head_class: Tensor
    head_box: Tensor

    @property
    def total(self) -> Tensor:
        return self.rpn_objectness + self.rpn_box + self.head_class + self.head_box

    def as_floats(self) -> dict:
        return {
            "rpn_objectness": float(self.rpn_objectness),
            "rpn_box": float(self.rpn_box),
            "head_class": float(self.head_class),
            "head_box": float(self.head_box),
            "total": float(self.total),
        }


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.shortcut: nn.Module = nn.Identity()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride=stride)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.conv2(F.relu(self.conv1(x))) + self.shortcut(x))


class Backbone(nn.Module):
    """Residual blocks, stride 1 for the first and 2 for every following block."""

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        blocks = []
        in_channels = 1
        for i, out_channels in enumerate(channels):
            blocks.append(ResidualBlock(in_channels, out_channels, stride=1 if i == 0 else 2))
            in_channels = out_channels
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = in_channels
        self.stride = 2 ** (len(channels) - 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.blocks(x)


class RegionProposalNetwork(nn.Module):
    def __init__(self, channels: int, anchors_per_cell: int):
        super().__init__()
        self.anchors_per_cell = anchors_per_cell
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.objectness = nn.Conv2d(channels, anchors_per_cell, 1)
        self.bbox = nn.Conv2d(channels, 4 * anchors_per_cell, 1)
        for layer in (self.conv, self.objectness, self.bbox):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, features: Tensor) -> Tuple[Tensor, Tensor]:
        """Logits (B, h*w*A) and deltas (B, h*w*A, 4), cell-major then anchor."""
        b, _, h, w = features.shape
        a = self.anchors_per_cell
        t = F.relu(self.conv(features))
        logits = self.objectness(t).permute(0, 2, 3, 1).reshape(b, h * w * a)
        deltas = self.bbox(t).view(b, a, 4, h, w).permute(0, 3, 4, 1, 2).reshape(b, h * w * a, 4)
        return logits, deltas


class RoiHeads(nn.Module):
    def __init__(self, channels: int, num_classes: int, head_channels: int, hidden: int, pool: int):
        super().__init__()
        self.pool = pool
        self.num_classes = num_classes
        self.reduce = nn.Conv2d(channels, head_channels, 1)
        self.fc = nn.Linear(head_channels * pool * pool, hidden)
        self.cls_score = nn.Linear(hidden, num_classes + 1)
        self.bbox_pred = nn.Linear(hidden, 4 * num_classes)
        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        nn.init.zeros_(self.cls_score.bias)
        nn.init.zeros_(self.bbox_pred.bias)

    def forward(self, fmap: FeatureMap, boxes: List[Tensor]) -> Tuple[Tensor, Tensor]:
        """Class logits (P, C+1) and box deltas (P, C, 4) for the concatenated boxes."""
        pooled = roi_align(
            fmap.tensor,
            [corners_to_xyxy(b) for b in boxes],
            output_size=self.pool,
            spatial_scale=1.0 / fmap.stride,
            sampling_ratio=2,
            aligned=True,
        )
        h = F.relu(self.reduce(pooled)).flatten(1)
        h = F.relu(self.fc(h))
        return self.cls_score(h), self.bbox_pred(h).view(-1, self.num_classes, 4)


class Detector(nn.Module):
    """H + RPN + S1/S2 with the anchor and sampling settings of ``DetectorConfig``."""

    def __init__(self, cfg: Optional[DetectorConfig] = None):
        super().__init__()
        self.cfg = cfg or DetectorConfig()
        self.cfg.validate()
        self.backbone = Backbone(self.cfg.channels)
        self.rpn = RegionProposalNetwork(self.backbone.out_channels, self.cfg.anchors_per_cell)
        self.heads = RoiHeads(
            self.backbone.out_channels,
            self.cfg.num_classes,
            self.cfg.head_channels,
            self.cfg.head_hidden,
            self.cfg.head_pool,
        )

    @property
    def stride(self) -> int:
        return self.backbone.stride

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    # -- H ------------------------------------------------------------------

    def extract_features(self, image: Tensor) -> FeatureMap:
        """Backbone features for (B, H, W) or (B, 1, H, W) images."""
        if image.dim() == 3:
            image = image.unsqueeze(1)
        if image.dim() != 4 or image.shape[1] != 1:
            raise ContractError(f"expected (B, H, W) or (B, 1, H, W) images, got shape {tuple(image.shape)}")
        height, width = int(image.shape[-2]), int(image.shape[-1])
        if height != width:
            raise ContractError(f"images must be square, got {height}x{width}")
        if height < self.stride:
            raise ContractError(f"image side {height} is smaller than the backbone stride {self.stride}")
        if not torch.isfinite(image).all():
            raise ContractError("image contains non-finite values")
        return FeatureMap(self.backbone(image), self.stride, (height, width))

    # -- RPN ----------------------------------------------------------------

    def anchors(self, fmap: FeatureMap) -> Tensor:
        return make_anchors(
            fmap.size,
            fmap.stride,
            self.cfg.anchor_sizes,
            self.cfg.anchor_ratios,
            dtype=fmap.tensor.dtype,
            device=fmap.tensor.device,
        )

    def rpn_propose(self, fmap: FeatureMap) -> List[ProposalSet]:
        """All M = cells x anchors proposals per image, decoded and clipped."""
        logits, deltas = self.rpn(fmap.tensor)
        anchors = self.anchors(fmap)
        proposals = []
        for b in range(logits.shape[0]):
            boxes = clip_boxes(decode_deltas(anchors, deltas[b]), fmap.image_size)
            proposals.append(ProposalSet(boxes, torch.sigmoid(logits[b])))
        return proposals

    def filter_proposals(self, proposals: ProposalSet, gt_boxes: Optional[Tensor] = None) -> Tensor:
        """Head input boxes: top pre-NMS by score, NMS, keep post-NMS, plus ground truth."""
        boxes = proposals.boxes.detach()
        scores = proposals.scores.detach()
        order = torch.sort(scores, descending=True, stable=True).indices[: self.cfg.pre_nms_top_n]
        boxes, scores = boxes[order], scores[order]
        keep = non_max_suppression(
            boxes, scores, torch.zeros_like(scores, dtype=torch.int64), self.cfg.proposal_nms_iou
        )[: self.cfg.post_nms_top_n]
        boxes = boxes[keep]
        if gt_boxes is not None and gt_boxes.numel():
            boxes = torch.cat([boxes, gt_boxes.to(boxes.dtype)], dim=0)
        return boxes

    # -- S1 / S2 -------------------------------------------------------------

    def detect_heads(self, fmap: FeatureMap, boxes: List[Tensor]) -> Tuple[Tensor, Tensor]:
        """Softmax class scores (P, C+1), background = 0, and deltas (P, C, 4)."""
        if sum(int(b.shape[0]) for b in boxes) == 0:
            raise ContractError("detect_heads needs at least one proposal")
        logits, deltas = self.heads(fmap, boxes)
        return F.softmax(logits, dim=1), deltas


# ---------------------------------------------------------------------------
# Proposal selection
# ---------------------------------------------------------------------------

def select_top_k(proposals: ProposalSet, k: int) -> ProposalSet:
    """The ``k`` highest-scoring proposals in descending order; ties keep the lower index."""
    if k < 1:
        raise ContractError(f"K must be >= 1, got {k}")
    if k > len(proposals):
        logger.warning("Requested top %d proposals but only %d exist; returning all", k, len(proposals))
    order = torch.sort(proposals.scores, descending=True, stable=True).indices[:k]
    return ProposalSet(proposals.boxes[order], proposals.scores[order])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _box_loss(deltas: Tensor, targets: Tensor, count: int) -> Tensor:
    if deltas.numel() == 0:
        return targets.new_zeros(())
    return F.smooth_l1_loss(deltas, targets, beta=1.0, reduction="sum") / count


def detection_loss_terms(
    class_logits: Tensor,
    box_deltas: Tensor,
    labels: Tensor,
    regression_targets: Tensor,
) -> Tuple[Tensor, Tensor]:
    """(classification, box) terms of ``detection_loss``."""
    n = int(labels.shape[0])
    if n == 0:
        logger.warning("No sampled boxes; detection loss is 0")
        zero = class_logits.sum() * 0.0
        return zero, zero
    classification = F.cross_entropy(class_logits, labels, reduction="sum") / n
    positive = torch.nonzero(labels > 0).flatten()
    if box_deltas.dim() == 3:
        selected = box_deltas[positive, labels[positive] - 1]
    else:
        selected = box_deltas[positive]
    return classification, _box_loss(selected, regression_targets[positive], n)


def detection_loss(
    class_logits: Tensor,
    box_deltas: Tensor,
    labels: Tensor,
    regression_targets: Tensor,
) -> Tensor:
    """Cross entropy over sampled boxes plus smooth-L1 on positives, both per sampled box.

    ``box_deltas`` is (N, C, 4) per-class or (N, 4) class-agnostic; ``labels``
    holds 0 for background and the class (>= 1) for positives.
    """
    classification, box = detection_loss_terms(class_logits, box_deltas, labels, regression_targets)
    return classification + box


def _sampled(labels: Tensor, cfg: DetectorConfig, generator: Optional[torch.Generator]) -> Tensor:
    pos, neg = sample_boxes(labels, cfg.boxes_per_image, cfg.positive_fraction, generator)
    return torch.cat([pos, neg])


def full_detector_loss(
    detector: Detector,
    images: Tensor,
    annotations: Sequence[Tuple[Tensor, Tensor]],
    proposals: Optional[Sequence[Tensor]] = None,
    seed: Optional[int] = None,
) -> DetectionLossBreakdown:
    """Four-term two-stage loss: RPN objectness + RPN box + head class + head box.

    ``annotations`` holds one (corner boxes (n, 4), labels (n,)) pair per image.
    ``proposals`` fixes the head input boxes; otherwise they come from the RPN
    (detached) plus the ground truth. ``seed`` makes box sampling repeatable.
    """
    cfg = detector.cfg
    if len(annotations) != images.shape[0]:
        raise ContractError(f"{images.shape[0]} images but {len(annotations)} annotation sets")
    generator = torch.Generator().manual_seed(seed) if seed is not None else None

    fmap = detector.extract_features(images)
    logits, deltas = detector.rpn(fmap.tensor)
    anchors = detector.anchors(fmap)

    rpn_logits, rpn_labels, rpn_deltas, rpn_targets = [], [], [], []
    head_boxes, head_labels, head_targets = [], [], []
    for b, (gt_boxes, gt_labels) in enumerate(annotations):
        gt_boxes = gt_boxes.to(anchors.dtype)
        assigned = assign_targets(
            anchors, gt_boxes, gt_labels, cfg.rpn_fg_iou, cfg.rpn_bg_iou, allow_low_quality_matches=True
        )
        idx = _sampled(assigned.labels, cfg, generator)
        rpn_logits.append(logits[b, idx])
        rpn_labels.append((assigned.labels[idx] > 0).to(logits.dtype))
        positive = idx[assigned.labels[idx] > 0]
        rpn_deltas.append(deltas[b, positive])
        rpn_targets.append(assigned.regression_targets[positive])

        if proposals is not None:
            candidates = proposals[b].to(anchors.dtype)
        else:
            with torch.no_grad():
                boxes = clip_boxes(decode_deltas(anchors, deltas[b].detach()), fmap.image_size)
                candidates = detector.filter_proposals(ProposalSet(boxes, torch.sigmoid(logits[b].detach())), gt_boxes)
        head_assigned = assign_targets(candidates, gt_boxes, gt_labels, cfg.head_fg_iou, cfg.head_bg_iou)
        head_idx = _sampled(head_assigned.labels, cfg, generator)
        head_boxes.append(candidates[head_idx])
        head_labels.append(head_assigned.labels[head_idx])
        head_targets.append(head_assigned.regression_targets[head_idx])

    sampled_logits = torch.cat(rpn_logits)
    n_rpn = int(sampled_logits.shape[0])
    if n_rpn == 0:
        logger.warning("No sampled anchors; RPN loss is 0")
        rpn_objectness = logits.sum() * 0.0
    else:
        rpn_objectness = F.binary_cross_entropy_with_logits(sampled_logits, torch.cat(rpn_labels), reduction="sum") / n_rpn
    rpn_box = _box_loss(torch.cat(rpn_deltas), torch.cat(rpn_targets), max(n_rpn, 1))

    labels = torch.cat(head_labels)
    if labels.numel() == 0:
        logger.warning("No sampled proposals; head loss is 0")
        zero = fmap.tensor.sum() * 0.0
        return DetectionLossBreakdown(rpn_objectness, rpn_box, zero, zero)
    class_logits, box_deltas = detector.heads(fmap, head_boxes)
    head_class, head_box = detection_loss_terms(class_logits, box_deltas, labels, torch.cat(head_targets))
    return DetectionLossBreakdown(rpn_objectness, rpn_box, head_class, head_box)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

@torch.no_grad()
def infer_detections(
    detector: Detector,
    images: Tensor,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
    max_detections: int = 100,
) -> List[List[Detection]]:
    """Per-image detections with scores >= ``score_thresh``, class-wise NMS, descending."""
    if not (0.0 <= score_thresh <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ContractError(f"thresholds must lie in [0, 1], got score {score_thresh}, iou {nms_iou}")
    if images.dim() == 2:
        images = images.unsqueeze(0)
    fmap = detector.extract_features(images)
    results: List[List[Detection]] = []
    for b, proposal_set in enumerate(detector.rpn_propose(fmap)):
        boxes = detector.filter_proposals(proposal_set)
        if boxes.shape[0] == 0:
            results.append([])
            continue
        single = FeatureMap(fmap.tensor[b: b + 1], fmap.stride, fmap.image_size)
        probs, deltas = detector.detect_heads(single, [boxes])

        all_boxes, all_scores, all_labels = [], [], []
        for c in range(1, detector.num_classes + 1):
            scores = probs[:, c]
            keep = scores >= score_thresh
            if not keep.any():
                continue
            all_boxes.append(clip_boxes(decode_deltas(boxes[keep], deltas[keep, c - 1]), fmap.image_size))
            all_scores.append(scores[keep])
            all_labels.append(torch.full((int(keep.sum()),), c, dtype=torch.int64))
        if not all_boxes:
            results.append([])
            continue
        cand_boxes = torch.cat(all_boxes)
        cand_scores = torch.cat(all_scores)
        cand_labels = torch.cat(all_labels)
        keep = non_max_suppression(cand_boxes, cand_scores, cand_labels, nms_iou)[:max_detections]
        results.append([
            Detection(tuple(float(v) for v in cand_boxes[i]), int(cand_labels[i]), float(cand_scores[i]))
            for i in keep.tolist()
        ])
    return results


def export_detections_jsonl(path: str, rows: Iterable[Tuple[str, Sequence[Detection]]]) -> int:
    """Write ``{id, box, label, score}`` lines with boxes as (row, col, width, height)."""
    lines = []
    for sample_id, detections in rows:
        for det in detections:
            rcwh = corners_to_rcwh(torch.tensor(det.box, dtype=torch.float64))
            lines.append(json.dumps({
                "id": sample_id,
                "box": [round(float(v), 4) for v in rcwh],
                "label": det.label,
                "score": round(det.score, 6),
            }))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
    return len(lines)
