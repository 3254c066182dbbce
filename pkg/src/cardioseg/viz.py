"""Qualitative overlays: class contours drawn on the grayscale image.

Output is deterministic (fixed palette, no timestamps) so rendered PNGs can
be compared byte-for-byte across runs.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ShapeError

# class index -> contour color; super-segmentation contour is white
CLASS_COLORS = {
    1: (231, 76, 60),    # LV, red
    2: (52, 122, 235),   # RV, blue
    3: (241, 196, 15),   # MYO, yellow
}
SUPER_COLOR = (255, 255, 255)


def _to_gray(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi - lo < 1e-12:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.round((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _contour(mask: np.ndarray) -> np.ndarray:
    mask = mask.astype(bool)
    if not mask.any():
        return mask
    return mask & ~ndimage.binary_erosion(mask)


def overlay(
    image: np.ndarray,
    sub_mask: Optional[np.ndarray] = None,
    super_mask: Optional[np.ndarray] = None,
    out_path: Optional[str | Path] = None,
) -> np.ndarray:
    """Render the image with label contours; returns (H, W, 3) uint8 and
    optionally writes a PNG (atomically)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {tuple(image.shape)}")
    rgb = np.stack([_to_gray(image)] * 3, axis=-1)

    if super_mask is not None:
        super_mask = np.asarray(super_mask)
        if super_mask.shape != image.shape:
            raise ShapeError("super_mask shape differs from image")
        rgb[_contour(super_mask)] = SUPER_COLOR

    if sub_mask is not None:
        sub_mask = np.asarray(sub_mask)
        if sub_mask.shape != image.shape:
            raise ShapeError("sub_mask shape differs from image")
        for cls in sorted(CLASS_COLORS):
            color = CLASS_COLORS.get(cls)
            contour = _contour(sub_mask == cls)
            rgb[contour] = color
        extra = sorted(set(np.unique(sub_mask)) - {0} - set(CLASS_COLORS))
        for cls in extra:
            rgb[_contour(sub_mask == cls)] = (200, 200, 200)

    if out_path is not None:
        out_path = Path(out_path)
        tmp = out_path.with_name(out_path.name + ".tmp")
        Image.fromarray(rgb, mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, out_path)
    return rgb
