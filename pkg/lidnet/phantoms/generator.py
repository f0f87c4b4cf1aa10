"""
phantoms/generator.py — Synthetic CT-like phantoms with exact lesion boxes.

A phantom is an elliptical body of roughly uniform attenuation, modulated by a
smooth low-frequency texture, with bright circular or elliptical lesions
inserted at random positions fully inside the body.
"""
from __future__ import annotations

import logging
from typing import List, Tuple

import numpy as np
from scipy import ndimage
from skimage.draw import ellipse

from lidnet.errors import ConfigurationError
from lidnet.models.config import PhantomSpec
from lidnet.phantoms.base import Annotation

logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 200
LESION_SPACING = 2


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 10.0, mode="reflect")
    std = field.std()
    return field / std if std > 0 else field


def _place_lesion(
    rng: np.random.Generator,
    body: np.ndarray,
    occupied: np.ndarray,
    radius_r: int,
    radius_c: int,
) -> Tuple[np.ndarray, np.ndarray, int, int]:
    rows, cols = np.nonzero(body)
    r_lo, r_hi = rows.min() + radius_r, rows.max() - radius_r
    c_lo, c_hi = cols.min() + radius_c, cols.max() - radius_c
    if r_lo > r_hi or c_lo > c_hi:
        raise ConfigurationError(f"lesion with radii ({radius_r}, {radius_c}) cannot fit inside the body")

    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        cr = int(rng.integers(r_lo, r_hi + 1))
        cc = int(rng.integers(c_lo, c_hi + 1))
        rr, cc_idx = ellipse(cr, cc, radius_r + 0.5, radius_c + 0.5, shape=body.shape)
        if body[rr, cc_idx].all() and not occupied[rr, cc_idx].any():
            return rr, cc_idx, cr, cc
    raise ConfigurationError(
        f"could not place a lesion with radii ({radius_r}, {radius_c}) after {MAX_PLACEMENT_ATTEMPTS} attempts"
    )


def generate_phantom(spec: PhantomSpec) -> Tuple[np.ndarray, List[Annotation]]:
    """Return a float32 image in [0, 1] and the annotations of its lesions."""
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    size = spec.image_size

    cr_body, cc_body, ar, ac = spec.resolved_body_ellipse()
    body = np.zeros((size, size), dtype=bool)
    body[ellipse(cr_body, cc_body, ar, ac, shape=body.shape)] = True

    image = np.zeros((size, size), dtype=np.float64)
    image[body] = spec.body_intensity
    if spec.background_texture_scale > 0:
        image[body] += spec.background_texture_scale * _texture(rng, size)[body]

    n_lo, n_hi = spec.n_lesions
    n_lesions = int(rng.integers(n_lo, n_hi + 1))
    occupied = np.zeros_like(body)
    annotations: List[Annotation] = []

    for _ in range(n_lesions):
        radius_r = int(rng.integers(spec.lesion_radius[0], spec.lesion_radius[1] + 1))
        stretch = rng.uniform(1.0, spec.lesion_elongation) if spec.lesion_elongation > 1.0 else 1.0
        radius_c = max(1, int(round(radius_r * stretch)))
        label = int(rng.integers(1, spec.num_classes + 1))

        rr, cc, center_r, center_c = _place_lesion(rng, body, occupied, radius_r, radius_c)
        # quadratic dome: full contrast at the centre, half at the rim
        dist2 = ((rr - center_r) / (radius_r + 0.5)) ** 2 + ((cc - center_c) / (radius_c + 0.5)) ** 2
        image[rr, cc] += spec.lesion_contrast * (1.0 - 0.5 * dist2)

        grown = ellipse(
            center_r, center_c,
            radius_r + 0.5 + LESION_SPACING, radius_c + 0.5 + LESION_SPACING,
            shape=body.shape,
        )
        occupied[grown] = True

        annotations.append(Annotation(
            row=float(rr.min()),
            col=float(cc.min()),
            width=float(cc.max() - cc.min() + 1),
            height=float(rr.max() - rr.min() + 1),
            label=label,
        ))

    logger.debug("Generated phantom seed=%d with %d lesions", spec.rng_seed, len(annotations))
    return np.clip(image, 0.0, 1.0).astype(np.float32), annotations
