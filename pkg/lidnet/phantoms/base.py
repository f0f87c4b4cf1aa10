"""
phantoms/base.py — Normalised sample records shared by the generator, the
dataset store and the training loop.

Boxes are exposed externally as (row, col, width, height) in pixels; the
networks work in corner form (r1, c1, r2, c2) via ``Annotation.corners``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from lidnet.errors import DataError


@dataclass(frozen=True)
class Annotation:
    """One labelled lesion box."""
    row: float
    col: float
    width: float
    height: float
    label: int

    @property
    def corners(self) -> Tuple[float, float, float, float]:
        return (self.row, self.col, self.row + self.height, self.col + self.width)

    def as_list(self) -> List[float]:
        """Manifest form: [row, col, width, height, label]."""
        return [self.row, self.col, self.width, self.height, self.label]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Annotation":
        if len(values) != 5:
            raise DataError(f"annotation must have 5 entries [row, col, width, height, label], got {list(values)}")
        row, col, width, height, label = values
        return cls(float(row), float(col), float(width), float(height), int(label))

    def validate(self, image_shape: Tuple[int, int], num_classes: int) -> None:
        height, width = image_shape
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"annotation box has non-positive size: {self.as_list()}")
        if self.row < 0 or self.col < 0 or self.row + self.height > height or self.col + self.width > width:
            raise DataError(f"annotation box {self.as_list()} lies outside image bounds {image_shape}")
        if not 1 <= self.label <= num_classes:
            raise DataError(f"annotation label {self.label} outside 1..{num_classes}")


@dataclass
class CtSample:
    """Paired LDCT/NDCT image with its lesion annotations."""
    id: str
    ldct: np.ndarray
    ndct: np.ndarray
    annotations: List[Annotation] = field(default_factory=list)

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.ndct.shape)  # type: ignore[return-value]

    def boxes(self) -> np.ndarray:
        """Corner-form boxes, shape (n, 4)."""
        if not self.annotations:
            return np.zeros((0, 4), dtype=np.float32)
        return np.asarray([a.corners for a in self.annotations], dtype=np.float32)

    def labels(self) -> np.ndarray:
        return np.asarray([a.label for a in self.annotations], dtype=np.int64)

    def validate(self, num_classes: int) -> None:
        if self.ldct.ndim != 2 or self.ldct.shape != self.ndct.shape:
            raise DataError(
                f"sample {self.id}: ldct {self.ldct.shape} and ndct {self.ndct.shape} must be identical 2-D shapes"
            )
        if not (np.isfinite(self.ldct).all() and np.isfinite(self.ndct).all()):
            raise DataError(f"sample {self.id}: non-finite intensities")
        for annotation in self.annotations:
            annotation.validate(self.shape, num_classes)
