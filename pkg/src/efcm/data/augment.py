"""Seeded patch augmentation.

Ops run in a fixed order, each enabled independently with probability
``p`` (default 0.5); the parameter of an enabled op is drawn uniformly from
its set. Factor semantics follow PIL's ``ImageEnhance``: brightness blends
with black, contrast with the mean grey, color with the greyscale image
(saturation scaling) and sharpness with a smoothed copy (unsharp strength).
A factor of 1.0 is the identity for all four and may be forced, never sampled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageEnhance, ImageFilter

ENHANCE = ("brightness", "contrast", "color", "sharpness")

PARAM_SETS: dict[str, tuple] = {
    "brightness": (0.5, 0.7, 1.3, 1.5),
    "contrast": (0.5, 0.8, 1.2, 1.5),
    "color": (0.5, 0.8, 1.2, 1.5),
    "sharpness": (0.5, 0.8, 1.2, 1.5),
    "blur": (1, 2, 3),
    "flip": ("L_R", "T_B"),
    "rotate": (-45, -30, -15, 15, 30, 45),
    "noise": (0.05, 0.1),
}

OP_ORDER = tuple(PARAM_SETS)

_ENHANCERS = {
    "brightness": ImageEnhance.Brightness,
    "contrast": ImageEnhance.Contrast,
    "color": ImageEnhance.Color,
    "sharpness": ImageEnhance.Sharpness,
}


@dataclass(frozen=True)
class AugmentSpec:
    ops: tuple = OP_ORDER
    p: float = 0.5
    param_sets: dict = field(default_factory=lambda: dict(PARAM_SETS))

    def __post_init__(self):
        for op in self.ops:
            if op not in PARAM_SETS:
                raise ValueError(f"unknown augmentation {op!r}")
            allowed = set(PARAM_SETS[op])
            if not set(self.param_sets[op]) <= allowed:
                raise ValueError(f"{op} parameters {self.param_sets[op]} outside {sorted(allowed, key=str)}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must be in [0, 1]")


def check_param(op: str, value) -> None:
    if op in ENHANCE and value == 1.0:
        return
    if value not in PARAM_SETS[op]:
        raise ValueError(f"{op}={value!r} is not one of {PARAM_SETS[op]}")


def sample_params(spec: AugmentSpec, rng: np.random.Generator) -> dict:
    """Draw ``{op: value}`` for the enabled ops, in application order."""
    out = {}
    for op in spec.ops:
        if rng.random() < spec.p:
            choices = spec.param_sets[op]
            out[op] = choices[int(rng.integers(len(choices)))]
    return out


def apply_op(img: Image.Image, op: str, value, rng: np.random.Generator | None = None) -> Image.Image:
    check_param(op, value)
    if op in ENHANCE:
        return img if value == 1.0 else _ENHANCERS[op](img).enhance(value)
    if op == "blur":
        return img.filter(ImageFilter.GaussianBlur(radius=value))
    if op == "flip":
        return img.transpose(Image.Transpose.FLIP_LEFT_RIGHT if value == "L_R" else Image.Transpose.FLIP_TOP_BOTTOM)
    if op == "rotate":
        return img.rotate(value, resample=Image.Resampling.BILINEAR)
    if op == "noise":
        rng = rng if rng is not None else np.random.default_rng(0)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        arr = arr + rng.normal(0.0, value, size=arr.shape).astype(np.float32)
        return Image.fromarray(np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8))
    raise ValueError(f"unknown augmentation {op!r}")


def augment(image: np.ndarray, spec: AugmentSpec | None = None, seed=0, params: dict | None = None):
    """Augment an ``H x W x 3`` uint8 image. Returns ``(image, params)``.

    ``params`` forces the exact ops and values to apply (still in the fixed
    order); otherwise they are sampled from ``spec`` with ``seed``.
    """
    spec = spec or AugmentSpec()
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected H x W x 3 uint8 image, got {image.shape} {image.dtype}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if params is None:
        params = sample_params(spec, rng)
    else:
        unknown = set(params) - set(OP_ORDER)
        if unknown:
            raise ValueError(f"unknown augmentations {sorted(unknown)}")
    img = Image.fromarray(image)
    applied = {}
    for op in OP_ORDER:
        if op in params:
            img = apply_op(img, op, params[op], rng)
            applied[op] = params[op]
    return np.asarray(img).copy(), applied
