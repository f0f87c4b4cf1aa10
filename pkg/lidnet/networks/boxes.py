"""
networks/boxes.py — Box geometry shared by the detector, the objectives and
the metrics.

External boxes are (row, col, width, height); internal boxes are corner form
(r1, c1, r2, c2) with r2 = row + height and c2 = col + width. Regression
deltas are (d_row, d_col, d_height, d_width): centre offsets relative to the
reference size and log-space size ratios.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
from torch import Tensor
from torchvision.ops import batched_nms, box_iou

from lidnet.errors import ContractError

BBOX_CLIP = math.log(1000.0 / 16)


def rcwh_to_corners(boxes: Tensor) -> Tensor:
    row, col, width, height = boxes.unbind(-1)
    return torch.stack((row, col, row + height, col + width), dim=-1)


def corners_to_rcwh(boxes: Tensor) -> Tensor:
    r1, c1, r2, c2 = boxes.unbind(-1)
    return torch.stack((r1, c1, c2 - c1, r2 - r1), dim=-1)


def corners_to_xyxy(boxes: Tensor) -> Tensor:
    """(r1, c1, r2, c2) -> (x1, y1, x2, y2), the order torchvision ops expect."""
    return boxes[..., [1, 0, 3, 2]]


def pairwise_iou(boxes_a: Tensor, boxes_b: Tensor) -> Tensor:
    """IoU matrix (len(a), len(b)); axis order does not matter for IoU."""
    if boxes_a.numel() == 0 or boxes_b.numel() == 0:
        return boxes_a.new_zeros((boxes_a.shape[0], boxes_b.shape[0]))
    return box_iou(boxes_a, boxes_b)


def _centers_sizes(boxes: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    heights = boxes[:, 2] - boxes[:, 0]
    widths = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * heights, boxes[:, 1] + 0.5 * widths, heights, widths


def encode_deltas(reference: Tensor, targets: Tensor) -> Tensor:
    ref_r, ref_c, ref_h, ref_w = _centers_sizes(reference)
    tgt_r, tgt_c, tgt_h, tgt_w = _centers_sizes(targets)
    return torch.stack((
        (tgt_r - ref_r) / ref_h,
        (tgt_c - ref_c) / ref_w,
        torch.log(tgt_h / ref_h),
        torch.log(tgt_w / ref_w),
    ), dim=1)


def decode_deltas(reference: Tensor, deltas: Tensor) -> Tensor:
    ref_r, ref_c, ref_h, ref_w = _centers_sizes(reference)
    d_r, d_c = deltas[:, 0], deltas[:, 1]
    d_h = deltas[:, 2].clamp(max=BBOX_CLIP)
    d_w = deltas[:, 3].clamp(max=BBOX_CLIP)
    ctr_r = d_r * ref_h + ref_r
    ctr_c = d_c * ref_w + ref_c
    h = torch.exp(d_h) * ref_h
    w = torch.exp(d_w) * ref_w
    return torch.stack((ctr_r - 0.5 * h, ctr_c - 0.5 * w, ctr_r + 0.5 * h, ctr_c + 0.5 * w), dim=1)


def clip_boxes(boxes: Tensor, image_size: Tuple[int, int], min_size: float = 1e-2) -> Tensor:
    """Clip to [0, H] x [0, W] keeping a strictly positive extent."""
    height, width = image_size
    r1 = boxes[:, 0].clamp(0, height - min_size)
    c1 = boxes[:, 1].clamp(0, width - min_size)
    r2 = torch.maximum(boxes[:, 2].clamp(0, height), r1 + min_size)
    c2 = torch.maximum(boxes[:, 3].clamp(0, width), c1 + min_size)
    return torch.stack((r1, c1, r2, c2), dim=1)


def make_anchors(
    feature_size: Tuple[int, int],
    stride: int,
    sizes: Sequence[float],
    ratios: Sequence[float],
    dtype: torch.dtype = torch.float32,
    device: Optional[torch.device] = None,
) -> Tensor:
    """Anchors ordered cell-major (row, col) then anchor index; shape (h*w*A, 4)."""
    h, w = feature_size
    templates = []
    for size in sizes:
        for ratio in ratios:
            ah = size * math.sqrt(ratio)
            aw = size / math.sqrt(ratio)
            templates.append((-0.5 * ah, -0.5 * aw, 0.5 * ah, 0.5 * aw))
    base = torch.tensor(templates, dtype=dtype, device=device)
    rows = (torch.arange(h, dtype=dtype, device=device) + 0.5) * stride
    cols = (torch.arange(w, dtype=dtype, device=device) + 0.5) * stride
    grid_r, grid_c = torch.meshgrid(rows, cols, indexing="ij")
    centers = torch.stack((grid_r, grid_c, grid_r, grid_c), dim=-1).reshape(-1, 1, 4)
    return (centers + base.unsqueeze(0)).reshape(-1, 4)


@dataclass
class TargetAssignment:
    """Per-box training targets: label -1 = ignored, 0 = background, >= 1 = class."""
    labels: Tensor
    matched_gt: Tensor
    regression_targets: Tensor
    max_iou: Tensor

    @property
    def positive(self) -> Tensor:
        return self.labels > 0

    @property
    def negative(self) -> Tensor:
        return self.labels == 0


def assign_targets(
    boxes: Tensor,
    gt_boxes: Tensor,
    gt_labels: Tensor,
    iou_fg: float,
    iou_bg: float,
    allow_low_quality_matches: bool = False,
) -> TargetAssignment:
    """Match proposals/anchors to ground truth by IoU.

    IoU >= iou_fg -> positive with the matched label and its offsets,
    IoU < iou_bg -> background, anything between is ignored. With
    ``allow_low_quality_matches`` each ground truth also claims the boxes
    that overlap it best, even below iou_fg.
    """
    if not 0.0 <= iou_bg <= iou_fg <= 1.0:
        raise ContractError(f"thresholds must satisfy 0 <= iou_bg <= iou_fg <= 1, got ({iou_fg}, {iou_bg})")
    n = boxes.shape[0]
    labels = torch.full((n,), -1, dtype=torch.int64, device=boxes.device)
    matched = torch.full((n,), -1, dtype=torch.int64, device=boxes.device)
    targets = boxes.new_zeros((n, 4))

    if gt_boxes.shape[0] == 0:
        labels.fill_(0)
        return TargetAssignment(labels, matched, targets, boxes.new_zeros((n,)))

    iou = pairwise_iou(boxes, gt_boxes)
    max_iou, argmax = iou.max(dim=1)
    labels[max_iou < iou_bg] = 0
    positive = max_iou >= iou_fg

    if allow_low_quality_matches:
        best_per_gt = iou.max(dim=0).values
        claims = (iou == best_per_gt.unsqueeze(0)) & (best_per_gt.unsqueeze(0) > 0)
        positive |= claims.any(dim=1)

    labels[positive] = gt_labels[argmax[positive]].to(torch.int64)
    matched[positive] = argmax[positive]
    if positive.any():
        targets[positive] = encode_deltas(boxes[positive], gt_boxes[argmax[positive]])
    return TargetAssignment(labels, matched, targets, max_iou)


def sample_boxes(
    labels: Tensor,
    batch_size: int,
    positive_fraction: float,
    generator: Optional[torch.Generator] = None,
) -> Tuple[Tensor, Tensor]:
    """Random positive/negative subset (indices) at the requested ratio."""
    positive = torch.nonzero(labels > 0).flatten()
    negative = torch.nonzero(labels == 0).flatten()
    num_pos = min(positive.numel(), int(batch_size * positive_fraction))
    num_neg = min(negative.numel(), batch_size - num_pos)
    perm_pos = torch.randperm(positive.numel(), generator=generator)[:num_pos]
    perm_neg = torch.randperm(negative.numel(), generator=generator)[:num_neg]
    return positive[perm_pos], negative[perm_neg]


def non_max_suppression(boxes: Tensor, scores: Tensor, labels: Tensor, iou_threshold: float) -> Tensor:
    """Greedy per-class NMS; returns kept indices sorted by decreasing score."""
    if boxes.numel() == 0:
        return torch.zeros((0,), dtype=torch.int64, device=boxes.device)
    return batched_nms(boxes, scores, labels, iou_threshold)
