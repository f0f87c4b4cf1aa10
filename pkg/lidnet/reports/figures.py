"""
reports/figures.py — Proposal / detection overlays and AP-vs-step curves.

Ground truth is drawn as red dashed boxes; proposals and detections as solid
boxes annotated with their score (and IoU for detections).
"""
from __future__ import annotations

import logging
from typing import Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.axes import Axes  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from lidnet.metrics.detection import iou_corners  # noqa: E402

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]


def _rectangle(box: Sequence[float], **style) -> Rectangle:
    r1, c1, r2, c2 = (float(v) for v in box)
    # matplotlib patches take (x, y) = (col, row)
    return Rectangle((c1 - 0.5, r1 - 0.5), c2 - c1, r2 - r1, fill=False, **style)


def draw_boxes(ax: Axes, boxes: Sequence[Sequence[float]], labels: Sequence[str], color: str,
               linestyle: str = "-") -> List[Rectangle]:
    patches = []
    for box, text in zip(boxes, labels):
        patch = ax.add_patch(_rectangle(box, edgecolor=color, linewidth=1.0, linestyle=linestyle))
        patches.append(patch)
        if text:
            ax.text(float(box[1]), float(box[0]) - 1.0, text, color=color, fontsize=6)
    return patches


def _image_axes(image: np.ndarray, title: str):
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(image, cmap="gray", vmin=0.0, vmax=1.0)
    ax.set_title(title, fontsize=8)
    ax.set_axis_off()
    return fig, ax


def save_proposal_overlay(
    path: str,
    image: np.ndarray,
    boxes: Sequence[Sequence[float]],
    scores: Sequence[float],
    title: str = "top-K proposals",
) -> int:
    """One rectangle per proposal with its score; returns the rectangle count."""
    fig, ax = _image_axes(image, title)
    patches = draw_boxes(ax, boxes, [f"{s:.2f}" for s in scores], color="yellow")
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return len(patches)


def save_detection_overlay(
    path: str,
    image: np.ndarray,
    detections: Sequence[Tuple[Box, float]],
    ground_truth: Sequence[Box],
    title: str = "detections",
) -> int:
    """Detections labelled with score and best IoU against the red dashed ground truth."""
    fig, ax = _image_axes(image, title)
    draw_boxes(ax, ground_truth, [""] * len(ground_truth), color="red", linestyle="--")
    labels = []
    for box, score in detections:
        best = max((iou_corners(box, gt) for gt in ground_truth), default=0.0)
        labels.append(f"{score:.2f} IoU {best:.2f}")
    patches = draw_boxes(ax, [d[0] for d in detections], labels, color="lime")
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return len(patches)


def save_ap_curve(path: str, curves: Dict[str, pd.DataFrame]) -> None:
    """AP-50 against training step, one line per run."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, frame in curves.items():
        ordered = frame.sort_values("step", kind="stable")
        ax.plot(ordered["step"], ordered["ap50"], marker="o", markersize=3, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("AP-50")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    if curves:
        ax.legend(fontsize=8)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
