"""Seeded synthetic histology-like data.

Patch-level: small RGB tiles whose nuclei density, size and stain differ per
class. Slide-level: white slides holding one tissue blob of normal texture;
positive slides additionally carry tumor patches (dense, large, dark nuclei)
on grid cells lying wholly inside the blob. Slides are rendered, segmented
and patched in memory; only the patches (resized), their coordinates, the
ground-truth tumor flags and a thumbnail are persisted.

Everything is a pure function of ``(config, seed)``; slide ``i`` draws from
``default_rng([seed, i])``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ..io import FeatureStore, load_arrays, save_arrays
from .preprocess import channel_means, resize
from .tissue import extract_patches, tissue_segment

MANIFEST = "manifest.json"
FORMAT_VERSION = 1

BACKGROUND = np.array([244.0, 242.0, 246.0])


@dataclass(frozen=True)
class Texture:
    base: tuple  # stroma/cytoplasm RGB
    nucleus: tuple  # nuclei RGB
    density: float  # nucleus centres per pixel
    sigma: float  # nucleus radius scale in pixels
    noise: float = 6.0

    def render(self, rng: np.random.Generator, h: int, w: int, noise: np.ndarray | None = None) -> np.ndarray:
        """Float32 ``h x w x 3`` raster; ``noise`` (unit normal, consumed in place) saves a draw."""
        pts = (rng.random((h, w), dtype=np.float32) < self.density).astype(np.float32)
        alpha = ndimage.gaussian_filter(pts, self.sigma, mode="wrap")
        alpha *= 1.5 * 2 * np.pi * self.sigma**2
        np.clip(alpha, 0.0, 1.0, out=alpha)
        base = np.asarray(self.base, dtype=np.float32)
        diff = np.asarray(self.nucleus, dtype=np.float32) - base
        img = rng.standard_normal((h, w, 3), dtype=np.float32) if noise is None else noise
        img *= self.noise
        img += base
        img += alpha[..., None] * diff
        return img


NORMAL = Texture(base=(232, 168, 200), nucleus=(120, 70, 160), density=0.0015, sigma=1.5)
TUMOR = Texture(base=(200, 120, 175), nucleus=(62, 28, 108), density=0.012, sigma=2.6)

PATCH_CLASSES = (
    NORMAL,
    TUMOR,
    Texture(base=(238, 190, 210), nucleus=(150, 60, 120), density=0.004, sigma=1.2),
    Texture(base=(215, 140, 185), nucleus=(90, 40, 150), density=0.007, sigma=3.2),
    Texture(base=(225, 150, 160), nucleus=(100, 60, 90), density=0.002, sigma=4.0),
)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.round(img, out=img) if img.dtype == np.float32 else np.round(img)
    return np.clip(img, 0, 255, out=img).astype(np.uint8)


def _splits(n: int, fractions, rng: np.random.Generator) -> list[str]:
    order = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    tags = np.empty(n, dtype=object)
    tags[order[:n_train]] = "train"
    tags[order[n_train : n_train + n_val]] = "val"
    tags[order[n_train + n_val :]] = "test"
    return list(tags)


def _check_fractions(fr) -> None:
    if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fr}")


# -- patch level ----------------------------------------------------------------------


@dataclass(frozen=True)
class PatchDataConfig:
    num_classes: int = 2
    per_class: int = 200
    image_size: int = 32
    render_size: int = 256  # textures are drawn at slide-patch scale, then resized
    splits: tuple = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(PATCH_CLASSES):
            raise ValueError(f"num_classes must be in [1, {len(PATCH_CLASSES)}]")
        if self.per_class < 1 or self.image_size < 1 or self.render_size < self.image_size:
            raise ValueError("per_class, image_size must be >= 1 and render_size >= image_size")
        _check_fractions(self.splits)


@dataclass
class PatchDataset:
    images: np.ndarray  # N x S x S x 3 uint8
    labels: np.ndarray
    ids: list
    splits: list
    channel_means: np.ndarray
    config: dict = field(default_factory=dict)

    def indices(self, split: str | None = None) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if split is None or s == split], dtype=np.int64)


def generate_patches(cfg: PatchDataConfig, seed: int = 0) -> PatchDataset:
    n = cfg.num_classes * cfg.per_class
    labels = np.repeat(np.arange(cfg.num_classes), cfg.per_class)
    images = np.empty((n, cfg.image_size, cfg.image_size, 3), dtype=np.uint8)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        tex = PATCH_CLASSES[labels[i]]
        raw = _to_uint8(tex.render(rng, cfg.render_size, cfg.render_size))
        images[i] = resize(raw, cfg.image_size)
    split = _splits(n, cfg.splits, np.random.default_rng([seed, 0x5F1]))
    train = [i for i, s in enumerate(split) if s == "train"] or list(range(n))
    return PatchDataset(
        images=images,
        labels=labels,
        ids=[f"p{i:06d}" for i in range(n)],
        splits=split,
        channel_means=channel_means(images[train]),
        config={"kind": "patch-level", **asdict(cfg), "seed": seed},
    )


def save_patch_dataset(ds: PatchDataset, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_arrays(root / "images", {"images": ds.images, "labels": ds.labels.astype(np.int64)})
    manifest = {
        "kind": "patch-level",
        "version": FORMAT_VERSION,
        "config": _jsonable(ds.config),
        "channel_means": [float(m) for m in ds.channel_means],
        "samples": [{"id": i, "label": int(l), "split": s} for i, l, s in zip(ds.ids, ds.labels, ds.splits)],
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_patch_dataset(root) -> PatchDataset:
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text())
    if manifest.get("kind") != "patch-level":
        raise ValueError(f"{root} is not a patch-level dataset")
    arrays, _ = load_arrays(root / "images")
    samples = manifest["samples"]
    return PatchDataset(
        images=arrays["images"],
        labels=arrays["labels"],
        ids=[s["id"] for s in samples],
        splits=[s["split"] for s in samples],
        channel_means=np.asarray(manifest["channel_means"]),
        config=manifest["config"],
    )


# -- slide level --------------------------------------------------------------------------


@dataclass(frozen=True)
class SlideDataConfig:
    num_positive: int = 100
    num_negative: int = 100
    slide_size: int = 2048
    patch_size: int = 256
    patch_out: int = 32  # stored patch resolution
    tumor_prevalence: float = 0.1  # fraction of a positive slide's tissue patches that are tumor
    tissue_fraction: float = 0.6
    thumb_downsample: int = 32
    splits: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if self.slide_size % 256 or self.slide_size < 256:
            raise ValueError(f"slide_size must be a positive multiple of 256, got {self.slide_size}")
        if self.slide_size % self.patch_size:
            raise ValueError("patch_size must divide slide_size")
        if self.num_positive < 0 or self.num_negative < 0 or self.num_positive + self.num_negative < 1:
            raise ValueError("need at least one slide")
        if not 0.0 < self.tumor_prevalence <= 1.0:
            raise ValueError("tumor_prevalence must be in (0, 1]")
        if not 0.05 <= self.tissue_fraction <= 0.95:
            raise ValueError("tissue_fraction must be in [0.05, 0.95]")
        _check_fractions(self.splits)


@dataclass
class SyntheticSlide:
    raster: np.ndarray  # H x W x 3 uint8
    tissue: np.ndarray  # H x W bool, generator ground truth
    tumor_cells: list  # (row, col) grid cells
    label: int
    seed: tuple


def _blob(rng: np.random.Generator, cells: int, frac: float, res: int = 8) -> np.ndarray:
    """Smooth single-component blob on a ``cells*res`` square grid covering about ``frac``."""
    n = cells * res
    yy, xx = np.mgrid[0:n, 0:n] / (n - 1) - 0.5
    cy, cx = rng.uniform(-0.08, 0.08, size=2)
    radial = -((yy - cy) ** 2 + (xx - cx) ** 2) * 6.0
    noise = ndimage.gaussian_filter(rng.standard_normal((n, n)), n / 10, mode="reflect")
    field = radial + noise / (noise.std() + 1e-12) * 0.35
    small = field > np.quantile(field, 1.0 - frac)
    labels, k = ndimage.label(small)
    if k > 1:
        sizes = ndimage.sum(small, labels, index=np.arange(1, k + 1))
        small = labels == (1 + int(np.argmax(sizes)))
    return ndimage.binary_fill_holes(small)


def render_slide(cfg: SlideDataConfig, index: int, label: int, seed: int = 0) -> SyntheticSlide:
    rng = np.random.default_rng([seed, index])
    size, ps = cfg.slide_size, cfg.patch_size
    cells = size // ps
    res = 8
    for _ in range(32):
        small = _blob(rng, cells, cfg.tissue_fraction, res)
        cov = small.reshape(cells, res, cells, res).mean(axis=(1, 3))
        inside = [tuple(rc) for rc in np.argwhere(cov >= 1.0)]
        if inside:
            break
    else:
        raise RuntimeError("could not place a tissue blob with an interior cell")
    up = size // (cells * res)
    tissue = np.repeat(np.repeat(small, up, 0), up, 1)

    noise = rng.standard_normal((size, size, 3), dtype=np.float32)
    bg = noise * np.float32(2.0)
    bg += BACKGROUND.astype(np.float32)
    img = NORMAL.render(rng, size, size, noise=noise)
    np.copyto(img, bg, where=~tissue[..., None])

    tumor_cells: list = []
    if label == 1:
        n_tissue = int((cov >= 0.5).sum())
        n_tumor = min(len(inside), max(1, int(round(cfg.tumor_prevalence * n_tissue))))
        pick = rng.choice(len(inside), size=n_tumor, replace=False)
        tumor_cells = sorted(inside[i] for i in pick)
        for r, c in tumor_cells:
            img[r * ps : (r + 1) * ps, c * ps : (c + 1) * ps] = TUMOR.render(rng, ps, ps)
    return SyntheticSlide(_to_uint8(img), tissue, [tuple(int(v) for v in rc) for rc in tumor_cells], label, (seed, index))


def slide_records(cfg: SlideDataConfig, slide: SyntheticSlide) -> dict:
    """Segment, patch and downsize one slide into its persisted arrays."""
    mask = tissue_segment(slide.raster)
    patches, imgs = extract_patches(slide.raster, mask, cfg.patch_size)
    tumor_set = set(slide.tumor_cells)
    coords = np.array([[p.x, p.y] for p in patches], dtype=np.int64).reshape(-1, 2)
    tumor = np.array([(p.y // cfg.patch_size, p.x // cfg.patch_size) in tumor_set for p in patches], dtype=bool)
    small = np.stack([resize(im, cfg.patch_out) for im in imgs]) if len(imgs) else np.zeros((0, cfg.patch_out, cfg.patch_out, 3), np.uint8)
    t = cfg.thumb_downsample
    thumb = np.asarray(Image.fromarray(slide.raster).reduce(t))
    return {"patches": small, "coords": coords, "tumor": tumor, "thumb": thumb}


@dataclass
class SlideDataset:
    store: FeatureStore
    slides: list  # manifest rows
    channel_means: np.ndarray
    config: dict

    def ids(self, split: str | None = None) -> list[str]:
        return [s["id"] for s in self.slides if split is None or s["split"] == split]

    def row(self, slide_id: str) -> dict:
        return next(s for s in self.slides if s["id"] == slide_id)


def generate_slides(cfg: SlideDataConfig, root, seed: int = 0) -> SlideDataset:
    root = Path(root)
    n = cfg.num_positive + cfg.num_negative
    labels = [1] * cfg.num_positive + [0] * cfg.num_negative
    # stratified split so every split sees both classes
    split = [None] * n
    srng = np.random.default_rng([seed, 0x5F1])
    for cls in (1, 0):
        idx = [i for i in range(n) if labels[i] == cls]
        for i, s in zip(idx, _splits(len(idx), cfg.splits, srng)):
            split[i] = s
    samples, rows = {}, []
    for i in range(n):
        slide = render_slide(cfg, i, labels[i], seed)
        rec = slide_records(cfg, slide)
        sid = f"slide{i:04d}"
        samples[sid] = {"arrays": rec, "label": labels[i], "split": split[i]}
        rows.append(
            {
                "id": sid,
                "label": labels[i],
                "split": split[i],
                "num_patches": int(len(rec["coords"])),
                "num_tumor": int(rec["tumor"].sum()),
                "height": cfg.slide_size,
                "width": cfg.slide_size,
                "patch_size": cfg.patch_size,
            }
        )
    train = [samples[r["id"]]["arrays"]["patches"] for r in rows if r["split"] == "train"]
    means = channel_means(np.concatenate(train)) if train else np.zeros(3)
    config = {"kind": "slide-level", **asdict(cfg), "seed": seed}
    store = FeatureStore.write(root / "slides", samples, meta={"config": _jsonable(config)})
    manifest = {
        "kind": "slide-level",
        "version": FORMAT_VERSION,
        "config": _jsonable(config),
        "channel_means": [float(m) for m in means],
        "slides": rows,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return SlideDataset(store, rows, np.asarray(means), config)


def load_slide_dataset(root) -> SlideDataset:
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text())
    if manifest.get("kind") != "slide-level":
        raise ValueError(f"{root} is not a slide-level dataset")
    store = FeatureStore.open(root / "slides")
    return SlideDataset(store, manifest["slides"], np.asarray(manifest["channel_means"]), manifest["config"])


def synth_generate(kind: str, config: dict | None, root, seed: int = 0):
    """Generate and persist a dataset of ``kind`` ("patch-level" or "slide-level")."""
    config = dict(config or {})
    for key in ("splits",):
        if key in config:
            config[key] = tuple(config[key])
    if kind == "patch-level":
        ds = generate_patches(PatchDataConfig(**config), seed)
        save_patch_dataset(ds, root)
        return ds
    if kind == "slide-level":
        return generate_slides(SlideDataConfig(**config), root, seed)
    raise ValueError(f"unknown dataset kind {kind!r}")


def load_dataset(root):
    kind = json.loads((Path(root) / MANIFEST).read_text()).get("kind")
    return load_patch_dataset(root) if kind == "patch-level" else load_slide_dataset(root)


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d
