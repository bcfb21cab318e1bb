"""Heatmap labels: non-negative 2-D maps with unit mass.

Heatmaps are plain ``float64`` numpy arrays. This module holds the few
operations every stage needs: validation, normalization and the
binary-mask to heatmap conversion used for pseudo labels and fixture
ground truth.
"""

import numpy as np
from scipy import ndimage

from ._io import resize_map

MASS_TOL = 1e-6


class EmptyLabelError(ValueError):
    pass


class DegenerateHeatmapError(ValueError):
    pass


def normalize(heatmap) -> np.ndarray:
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if np.any(heatmap < 0) or not np.all(np.isfinite(heatmap)):
        raise DegenerateHeatmapError("heatmap has negative or non-finite values")
    total = heatmap.sum()
    if total <= 0:
        raise DegenerateHeatmapError("degenerate ground truth: zero mass")
    return heatmap / total


def is_heatmap(heatmap, tol=MASS_TOL) -> bool:
    heatmap = np.asarray(heatmap)
    return heatmap.ndim == 2 and bool(heatmap.min() >= 0) and abs(float(heatmap.sum()) - 1.0) <= tol


def uniform(shape) -> np.ndarray:
    return np.full(shape, 1.0 / (shape[0] * shape[1]))


def blur_radius(sigma: float) -> int:
    """Kernel radius used by :func:`mask_to_heatmap` (3 sigma, rounded)."""
    return int(3.0 * sigma + 0.5) if sigma > 0 else 0


def mask_to_heatmap(mask, blur_sigma: float = 1.0, size=None) -> np.ndarray:
    """Turn a binary mask into a heatmap label.

    The mask is optionally resized (bilinear) to ``size``, binarized at 0.5,
    blurred with a Gaussian truncated at 3 sigma (reflected at the border, so
    a full mask stays uniform)
    and divided by its sum. ``blur_sigma=0`` skips the blur.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if size is not None:
        mask = resize_map(mask, size)
    binary = (mask >= 0.5).astype(np.float64)
    if binary.sum() == 0:
        raise EmptyLabelError("empty label: mask has no foreground pixels")
    if blur_sigma > 0:
        binary = ndimage.gaussian_filter(binary, sigma=blur_sigma, mode="reflect", truncate=3.0)
        binary = np.clip(binary, 0.0, None)
    return binary / binary.sum()
