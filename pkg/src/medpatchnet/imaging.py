"""Resampling helpers shared by augmentation and Grad-CAM upsampling."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping."""
    h, w = arr.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1), indexing="ij")
    return ndimage.map_coordinates(np.asarray(arr, dtype=np.float64), [yy, xx], order=1, mode="nearest")


def crop_rotate_coords(side: int, top: float, left: float, crop: float, angle_deg: float):
    """Source coordinates for "square crop, resize to ``side``, rotate about center".

    Output pixel centers are rotated back by ``angle_deg`` inside the
    output frame, then mapped into the crop window of the source image.
    """
    c = (side - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(side, dtype=np.float64), np.arange(side, dtype=np.float64), indexing="ij")
    if angle_deg:
        t = np.deg2rad(angle_deg)
        cos, sin = np.cos(t), np.sin(t)
        dy, dx = yy - c, xx - c
        yy, xx = c + cos * dy - sin * dx, c + sin * dy + cos * dx
    scale = crop / side
    return top + (yy + 0.5) * scale - 0.5, left + (xx + 0.5) * scale - 0.5


def sample(arr: np.ndarray, coords, order: int) -> np.ndarray:
    """Sample ``arr`` at fractional coordinates.

    Coordinates within half a pixel of the border are clamped onto it;
    anything further out reads as zero.
    """
    arr = np.asarray(arr, dtype=np.float64)
    inside = np.ones(np.shape(coords[0]), dtype=bool)
    clamped = []
    for axis, cc in enumerate(coords):
        n = arr.shape[axis]
        inside &= (cc >= -0.5) & (cc <= n - 0.5)
        clamped.append(np.clip(cc, 0, n - 1))
    out = ndimage.map_coordinates(arr, clamped, order=order, mode="nearest")
    return np.where(inside, out, 0.0)
