"""Resize and mean-subtract images into ``3 x S x S`` float arrays."""

from __future__ import annotations

import numpy as np
from PIL import Image


def _check_rgb(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 RGB raster, got shape {image.shape}")


def to_unit(image: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [0, 1]; float input is taken as already scaled."""
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32)


def channel_means(images: np.ndarray) -> np.ndarray:
    """Per-channel means in [0, 1] units over ``N x H x W x 3`` images."""
    return to_unit(images).reshape(-1, 3).astype(np.float64).mean(axis=0)


def resize(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to ``size x size``; a no-op (same array) if already that size."""
    _check_rgb(image)
    if image.shape[0] == size and image.shape[1] == size:
        return image
    if image.dtype == np.uint8:
        return np.asarray(Image.fromarray(image).resize((size, size), Image.Resampling.BILINEAR))
    chans = [
        np.asarray(Image.fromarray(image[..., c].astype(np.float32), mode="F").resize((size, size), Image.Resampling.BILINEAR))
        for c in range(3)
    ]
    return np.stack(chans, axis=-1)


def preprocess(image: np.ndarray, mean=(0.0, 0.0, 0.0), size: int = 224) -> np.ndarray:
    """``H x W x 3`` raster -> float32 ``3 x size x size`` minus per-channel ``mean``."""
    _check_rgb(image)
    x = to_unit(resize(image, size)) - np.asarray(mean, dtype=np.float32)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def preprocess_batch(images: np.ndarray, mean=(0.0, 0.0, 0.0), size: int = 224) -> np.ndarray:
    if images.ndim != 4:
        raise ValueError(f"expected N x H x W x 3 images, got {images.shape}")
    if images.shape[1] == size and images.shape[2] == size:
        if images.shape[3] != 3:
            raise ValueError(f"expected N x H x W x 3 images, got {images.shape}")
        x = to_unit(images) - np.asarray(mean, dtype=np.float32)
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))
    return np.stack([preprocess(im, mean, size) for im in images])
