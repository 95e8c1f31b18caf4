import numpy as np
import pytest
from PIL import Image
from hypothesis import given, settings
from hypothesis import strategies as st

from efcm.data import (
    OP_ORDER,
    PARAM_SETS,
    AugmentSpec,
    PatchDataConfig,
    SlideDataConfig,
    augment,
    channel_means,
    extract_patches,
    generate_patches,
    generate_slides,
    load_dataset,
    preprocess,
    preprocess_batch,
    render_slide,
    resize,
    sample_params,
    synth_generate,
    tissue_segment,
)
from efcm.data.augment import apply_op, check_param
from efcm.data.tissue import otsu_threshold, saturation

SMALL_SLIDES = SlideDataConfig(num_positive=3, num_negative=3, slide_size=1024, patch_size=128, splits=(0.34, 0.33, 0.33))


def img(seed=0, size=16):
    return np.random.default_rng(seed).integers(0, 256, (size, size, 3), dtype=np.uint8)


# -- augmentation --------------------------------------------------------------------------


def test_sampled_params_stay_in_sets():
    rng = np.random.default_rng(0)
    spec = AugmentSpec()
    seen = {op: set() for op in OP_ORDER}
    for _ in range(2000):
        for op, v in sample_params(spec, rng).items():
            assert v in PARAM_SETS[op]
            seen[op].add(v)
    assert all(seen[op] == set(PARAM_SETS[op]) for op in OP_ORDER)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augment_is_seeded(seed):
    a, pa = augment(img(1), seed=seed)
    b, pb = augment(img(1), seed=seed)
    assert pa == pb
    np.testing.assert_array_equal(a, b)
    assert a.shape == (16, 16, 3) and a.dtype == np.uint8


def test_identities():
    x = img(2)
    np.testing.assert_array_equal(augment(x, params={"brightness": 1.0})[0], x)
    once = apply_op(apply_op(Image.fromarray(x), "flip", "L_R"), "flip", "L_R")
    np.testing.assert_array_equal(np.asarray(once), x)
    np.testing.assert_array_equal(augment(x, params={})[0], x)


def test_flip_matches_numpy():
    x = img(3)
    np.testing.assert_array_equal(augment(x, params={"flip": "L_R"})[0], x[:, ::-1])
    np.testing.assert_array_equal(augment(x, params={"flip": "T_B"})[0], x[::-1])


def test_brightness_scales():
    x = np.full((4, 4, 3), 100, np.uint8)
    np.testing.assert_array_equal(augment(x, params={"brightness": 0.5})[0], 50)


def test_forced_params_are_validated():
    with pytest.raises(ValueError):
        augment(img(), params={"rotate": 10})
    with pytest.raises(ValueError):
        augment(img(), params={"solarize": 1})
    with pytest.raises(ValueError):
        AugmentSpec(param_sets={**PARAM_SETS, "blur": (5,)})
    with pytest.raises(ValueError):
        check_param("blur", 1.0 + 0.5)
    with pytest.raises(ValueError):
        augment(img().astype(np.float32))


def test_p_zero_and_one():
    rng = np.random.default_rng(0)
    assert sample_params(AugmentSpec(p=0.0), rng) == {}
    assert list(sample_params(AugmentSpec(p=1.0), rng)) == list(OP_ORDER)


# -- preprocessing -------------------------------------------------------------------------


def test_preprocess_shapes_and_mean():
    x = np.full((8, 8, 3), 51, np.uint8)
    out = preprocess(x, mean=(0.2, 0.2, 0.2), size=16)
    assert out.shape == (3, 16, 16) and out.dtype == np.float32
    np.testing.assert_allclose(out, 0.0, atol=1e-6)
    assert preprocess_batch(np.stack([x, x]), size=8).shape == (2, 3, 8, 8)
    np.testing.assert_allclose(channel_means(np.stack([x, x])), 0.2)
    assert resize(x, 8) is x
    with pytest.raises(ValueError):
        preprocess(np.zeros((8, 8), np.uint8))


# -- tissue ---------------------------------------------------------------------------------


def test_otsu_on_bimodal():
    v = np.concatenate([np.full(100, 0.1), np.full(100, 0.7)])
    t = otsu_threshold(v)
    np.testing.assert_array_equal(v > t, v == 0.7)


def test_saturation_of_grey_is_zero():
    assert saturation(np.full((3, 3, 3), 200, np.uint8)).max() == 0


def test_segmentation_recovers_tissue():
    slide = render_slide(SMALL_SLIDES, 0, 1, seed=0)
    mask = tissue_segment(slide.raster)
    assert mask.shape == slide.tissue.shape
    cov = (mask & slide.tissue).sum() / slide.tissue.sum()
    fp = (mask & ~slide.tissue).sum() / (~slide.tissue).sum()
    assert cov > 0.98 and fp < 0.01


def test_blank_slide_has_no_tissue():
    blank = np.full((256, 256, 3), 244, np.uint8)
    assert not tissue_segment(blank).any()


def test_extract_patches_grid():
    slide = np.zeros((64, 64, 3), np.uint8)
    mask = np.zeros((64, 64), bool)
    mask[:32, :48] = True
    patches, images = extract_patches(slide, mask, 16)
    assert {(p.x, p.y) for p in patches} == {(x, y) for x in (0, 16, 32) for y in (0, 16)}
    assert all(im.shape == (16, 16, 3) for im in images)
    with pytest.raises(ValueError):
        extract_patches(slide, mask, 128)
    with pytest.raises(ValueError):
        extract_patches(slide, mask[:10], 16)


# -- synthetic datasets --------------------------------------------------------------------


def test_patch_dataset_is_seeded_and_split(tmp_path):
    cfg = PatchDataConfig(per_class=10, render_size=64)
    a = generate_patches(cfg, seed=1)
    b = generate_patches(cfg, seed=1)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.shape == (20, 32, 32, 3)
    parts = [set(a.indices(s).tolist()) for s in ("train", "val", "test")]
    assert sum(map(len, parts)) == 20 and not (parts[0] & parts[1])
    synth_generate("patch-level", {"per_class": 10, "render_size": 64}, tmp_path / "p", seed=1)
    loaded = load_dataset(tmp_path / "p")
    np.testing.assert_array_equal(loaded.images, a.images)
    np.testing.assert_array_equal(loaded.labels, a.labels)


def test_classes_differ_in_darkness():
    ds = generate_patches(PatchDataConfig(per_class=10, render_size=64), seed=0)
    means = [ds.images[ds.labels == k].mean() for k in (0, 1)]
    assert means[1] < means[0]


def test_slide_rendering_contract():
    pos = render_slide(SMALL_SLIDES, 0, 1, seed=4)
    neg = render_slide(SMALL_SLIDES, 1, 0, seed=4)
    assert neg.tumor_cells == []
    assert pos.tumor_cells
    ps = SMALL_SLIDES.patch_size
    for r, c in pos.tumor_cells:
        assert pos.tissue[r * ps : (r + 1) * ps, c * ps : (c + 1) * ps].all()
    again = render_slide(SMALL_SLIDES, 0, 1, seed=4)
    np.testing.assert_array_equal(again.raster, pos.raster)


def test_slide_dataset_roundtrip(tmp_path):
    ds = generate_slides(SMALL_SLIDES, tmp_path / "s", seed=2)
    assert len(ds.ids()) == 6
    for split in ("train", "val", "test"):
        labels = {ds.row(i)["label"] for i in ds.ids(split)}
        assert labels == {0, 1}
    loaded = load_dataset(tmp_path / "s")
    sid = ds.ids("test")[0]
    np.testing.assert_array_equal(loaded.store.get(sid, "coords"), ds.store.get(sid, "coords"))
    for sid in ds.ids():
        row = ds.row(sid)
        tumor = ds.store.get(sid, "tumor")
        assert tumor.any() == bool(row["label"])
        assert ds.store.get(sid, "patches").shape[1:] == (32, 32, 3)
    with pytest.raises(ValueError):
        synth_generate("voxels", None, tmp_path / "x")


def test_slide_config_validation():
    with pytest.raises(ValueError):
        SlideDataConfig(slide_size=1000)
    with pytest.raises(ValueError):
        SlideDataConfig(tumor_prevalence=0.0)
    with pytest.raises(ValueError):
        PatchDataConfig(splits=(0.5, 0.5, 0.5))
