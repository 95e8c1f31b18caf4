"""Tissue segmentation and grid patch extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage


def saturation(rgb: np.ndarray) -> np.ndarray:
    """HSV saturation in [0, 1] of an ``H x W x 3`` raster."""
    x = rgb.astype(np.float32)
    mx = x.max(axis=-1)
    mn = x.min(axis=-1)
    return np.where(mx > 0, (mx - mn) / np.maximum(mx, 1e-12), 0.0).astype(np.float32)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    hist, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    hist = hist.astype(np.float64)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mu0 = m0 / np.maximum(w0, 1)
    mu1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    # upper edge of the last background bin, so ``values > t`` is the foreground
    return float(edges[int(np.argmax(between)) + 1])


def tissue_segment(
    slide: np.ndarray,
    downsample: int = 8,
    blur_sigma: float = 2.0,
    min_saturation: float = 0.05,
    min_area: int = 64,
) -> np.ndarray:
    """Boolean tissue mask at full slide resolution.

    Saturation on a ``downsample``-x thumbnail, gaussian blur, Otsu threshold
    (floored at ``min_saturation`` so a blank slide stays empty), then
    connected components smaller than ``min_area`` thumbnail pixels dropped.
    """
    if slide.ndim != 3 or slide.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 slide, got {slide.shape}")
    h, w = slide.shape[:2]
    th, tw = max(1, h // downsample), max(1, w // downsample)
    crop = np.ascontiguousarray(slide[: th * downsample, : tw * downsample])
    if crop.dtype == np.uint8:
        thumb = np.asarray(Image.fromarray(crop).reduce(downsample))
    else:
        thumb = crop.reshape(th, downsample, tw, downsample, 3).mean(axis=(1, 3))
    sat = ndimage.gaussian_filter(saturation(thumb), blur_sigma)
    if sat.max() < min_saturation:
        return np.zeros((h, w), dtype=bool)
    thr = max(otsu_threshold(sat), min_saturation)
    small = sat > thr
    labels, n = ndimage.label(small)
    if n:
        areas = ndimage.sum(small, labels, index=np.arange(1, n + 1))
        keep = np.concatenate([[False], areas >= min_area])
        small = keep[labels]
    mask = np.zeros((h, w), dtype=bool)
    mask[: th * downsample, : tw * downsample] = np.repeat(np.repeat(small, downsample, 0), downsample, 1)
    return mask


@dataclass(frozen=True)
class Patch:
    x: int
    y: int
    size: int
    coverage: float


def extract_patches(slide: np.ndarray, mask: np.ndarray, size: int = 256, min_coverage: float = 0.5):
    """Non-overlapping ``size`` grid patches whose mask coverage is at least ``min_coverage``.

    Returns ``(patches, images)`` in row-major grid order; ``images`` is
    ``K x size x size x 3`` with the slide's dtype.
    """
    h, w = slide.shape[:2]
    if size > h or size > w:
        raise ValueError(f"patch size {size} larger than slide {h}x{w}")
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} does not match slide {h}x{w}")
    gh, gw = h // size, w // size
    cov = mask[: gh * size, : gw * size].reshape(gh, size, gw, size).mean(axis=(1, 3))
    patches, images = [], []
    for r in range(gh):
        for c in range(gw):
            if cov[r, c] >= min_coverage:
                y, x = r * size, c * size
                patches.append(Patch(x, y, size, float(cov[r, c])))
                images.append(slide[y : y + size, x : x + size])
    imgs = np.stack(images) if images else np.zeros((0, size, size, 3), dtype=slide.dtype)
    return patches, imgs
