import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import max_grad_error, small_head

from efcm.data import PatchDataConfig, SlideDataConfig, generate_patches, generate_slides
from efcm.distill import DistillConfig, distill_train
from efcm.mil import (
    AttentionMILHead,
    Bag,
    StrategyConfig,
    attention_pool,
    attention_weights,
    bags_from_dataset,
    changed,
    clam_eval,
    export_heatmap,
    extract_features,
    ib_select,
    normalized_weights,
    param_hashes,
    read_pgm,
    run_strategy,
    top_k,
    train_head,
    train_scorer,
)
from efcm.models import ModelSpec, RandomTeacher
from efcm.tensor import Tensor

SPEC = ModelSpec("fpd", input_size=32, dim=32, depth=1, teacher_dim=16, groups=8, reduced_dim=8)


def feats(seed, n, d=6):
    return np.random.default_rng(seed).standard_normal((n, d))


# -- pooling -------------------------------------------------------------------------------


def test_single_instance_gets_all_weight():
    head = small_head(0)
    emb, w = attention_pool(feats(0, 1), head)
    assert w.data.tolist() == [1.0]
    h, _ = head.scores(Tensor(feats(0, 1)))
    np.testing.assert_allclose(emb.data, h.data[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 9))
def test_pooling_is_permutation_invariant(seed, n):
    head = small_head(seed % 5)
    x = feats(seed, n)
    perm = np.random.default_rng(seed + 1).permutation(n)
    e1, w1 = attention_pool(x, head)
    e2, w2 = attention_pool(x[perm], head)
    np.testing.assert_allclose(e1.data, e2.data, atol=1e-12)
    np.testing.assert_allclose(w1.data[perm], w2.data, atol=1e-12)
    np.testing.assert_allclose(w1.data.sum(), 1.0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_duplicating_the_bag_keeps_the_embedding(seed, n):
    head = small_head(1)
    x = feats(seed, n)
    e1, w1 = attention_pool(x, head)
    e2, w2 = attention_pool(np.concatenate([x, x]), head)
    np.testing.assert_allclose(e1.data, e2.data, atol=1e-12)
    np.testing.assert_allclose(w2.data, np.tile(w1.data, 2) / 2, atol=1e-12)


def test_empty_and_mismatched_bags_raise():
    head = small_head(0)
    with pytest.raises(ValueError):
        attention_pool(np.zeros((0, 6)), head)
    with pytest.raises(ValueError):
        attention_pool(np.zeros((3, 5)), head)
    with pytest.raises(ValueError):
        Bag("s", np.zeros((0, 2)), 0)
    with pytest.raises(ValueError):
        Bag("s", [[0, 0], [300, 0]], 0, patch_size=256, height=512, width=512)


@pytest.mark.parametrize("seed", range(2))
def test_pool_gradient(seed):
    head = small_head(seed)
    x = feats(seed, 4)
    assert max_grad_error(lambda t: head.pool(t)[0], head, x, seed) < 1e-4


# -- selection -----------------------------------------------------------------------------


def test_top_k_ties_and_short_bags():
    np.testing.assert_array_equal(top_k([0.5, 0.9, 0.5, 0.1], 2), [0, 1])
    np.testing.assert_array_equal(top_k([0.2, 0.2, 0.2], 2), [0, 1])
    np.testing.assert_array_equal(top_k([0.3], 5), [0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.integers(1, 25))
def test_top_k_picks_largest(scores, k):
    idx = top_k(scores, k)
    assert len(idx) == min(k, len(scores))
    assert len(set(idx.tolist())) == len(idx)
    rest = np.setdiff1d(np.arange(len(scores)), idx)
    if len(rest):
        assert min(np.asarray(scores)[idx]) >= max(np.asarray(scores)[rest])


def test_ib_select_uses_scorer():
    scorer = small_head(2)
    bag = Bag("s", np.zeros((5, 2)), 1, features={"teacher": feats(3, 5)})
    _, s = scorer.scores(Tensor(bag.features["teacher"]))
    np.testing.assert_array_equal(ib_select(bag, 2, scorer), np.sort(np.argsort(-s.data)[:2]))
    np.testing.assert_array_equal(ib_select(bag, 9, scorer), np.arange(5))
    with pytest.raises(KeyError):
        ib_select(bag, 2, scorer, name="student")


# -- heatmaps ------------------------------------------------------------------------------


def test_heatmap_raster_and_sidecar(tmp_path):
    bag = Bag("s7", [[0, 0], [256, 0], [256, 512]], 1, patch_size=256, height=768, width=512)
    base = export_heatmap(bag, [0.2, 0.5, 0.3], tmp_path / "hm" / "s7")
    raster = read_pgm(base.with_suffix(".pgm"))
    assert raster.shape == (3, 2)
    assert raster[0, 0] == 0 and raster[0, 1] == 255 and raster[2, 1] == 85
    side = json.loads(base.with_suffix(".json").read_text())
    assert side["grid"] == [3, 2] and not side["degenerate"]
    assert [c["normalized"] for c in side["cells"]] == pytest.approx([0.0, 1.0, 1 / 3])


def test_uniform_weights_are_half(tmp_path):
    w, degenerate = normalized_weights([0.25, 0.25, 0.25, 0.25])
    assert degenerate and np.all(w == 0.5)
    bag = Bag("s", [[0, 0], [256, 256]], 0, patch_size=256, height=512, width=512)
    base = export_heatmap(bag, [0.5, 0.5], tmp_path / "u")
    assert json.loads(base.with_suffix(".json").read_text())["degenerate"]
    with pytest.raises(ValueError):
        export_heatmap(bag, [1.0], tmp_path / "bad")


# -- training and strategies ----------------------------------------------------------------


def test_hashes_detect_changes():
    head = small_head(0)
    h0 = param_hashes(head, "head.")
    head.classifier.bias.data[0] += 1e-12
    assert changed(h0, param_hashes(head, "head.")) == {"head.classifier.bias"}


def _toy_bags(n=16, d=6, seed=0):
    rng = np.random.default_rng(seed)
    bags = []
    for i in range(n):
        label = i % 2
        x = rng.standard_normal((5, d)) * 0.1
        if label:
            x[0, 0] += 3.0
        split = "train" if i < 10 else "val" if i < 13 else "test"
        bags.append(Bag(f"b{i}", np.zeros((5, 2)), label, split, features={"f": x}))
    return bags


def test_train_head_learns_toy_task():
    bags = _toy_bags()
    cfg = StrategyConfig(strategy="retrain", epochs=30, batch_size=4, hidden=8)
    train = [b for b in bags if b.split == "train"]
    val = [b for b in bags if b.split == "val"]
    head, history = train_head(train, "f", cfg, val)
    assert len(history) == 30 and 1 <= head.best_epoch <= 30
    assert history[-1]["loss"] < history[0]["loss"]
    w = attention_weights(head, train[1], "f")
    assert np.argmax(w) == 0


@pytest.fixture(scope="module")
def slide_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("slides")
    cfg = SlideDataConfig(num_positive=4, num_negative=4, slide_size=512, patch_size=128, splits=(0.5, 0.25, 0.25))
    ds = generate_slides(cfg, root, seed=1)
    patches = generate_patches(PatchDataConfig(per_class=8, render_size=64), seed=1)
    student = distill_train(SPEC, patches, DistillConfig(total_steps=3, warmup_steps=1, batch_size=4)).model
    teacher = RandomTeacher(SPEC.with_(variant="teacher-frozen-random"), rng=np.random.default_rng(1234))
    bags = bags_from_dataset(ds)
    extract_features(teacher, bags, ds.channel_means, 32, "teacher")
    cfg = StrategyConfig(k=4, epochs=2, etc_epochs=1, scorer_epochs=2, batch_size=2, hidden=8)
    train = [b for b in bags if b.split == "train"]
    val = [b for b in bags if b.split == "val"]
    scorer = train_scorer(train, cfg, val)
    teacher_head, _ = train_head(train, "teacher", cfg, val)
    return ds, student, bags, cfg, scorer, teacher_head


def _run(strategy, slide_setup):
    ds, student, bags, cfg, scorer, teacher_head = slide_setup
    cfg = StrategyConfig(**{**cfg.to_dict(), "strategy": strategy, "betas": tuple(cfg.betas)})
    return run_strategy(cfg, copy.deepcopy(student), copy.deepcopy(bags), ds.channel_means, teacher_head, scorer)


def test_reuse_changes_nothing(slide_setup):
    r = _run("reuse", slide_setup)
    assert r.audit["student_changed"] == [] and r.audit["head_changed"] == []
    assert r.audit["student_hash_before"] == r.audit["student_hash_after"]
    assert r.head is slide_setup[5]


def test_retrain_changes_only_head(slide_setup):
    r = _run("retrain", slide_setup)
    assert r.audit["student_changed"] == []
    assert r.audit["head_changed"]
    assert 0.0 <= r.metrics["test"]["auc"] <= 1.0


def test_etc_spares_the_extractor(slide_setup):
    r = _run("etc", slide_setup)
    moved = r.audit["student_changed"]
    assert moved and not any(n.startswith("student.extractor.") for n in moved)
    assert any(n.startswith("student.blocks.") for n in moved)
    assert all(len(sel) <= 4 for sel in r.selected.values())
    acc, auc_, scores = clam_eval(r.student, r.head, [b for b in slide_setup[2] if b.split == "test"], slide_setup[0].channel_means)
    assert len(scores) == 2 and 0.0 <= acc <= 1.0


def test_reuse_requires_teacher_head(slide_setup):
    ds, student, bags, cfg, _, _ = slide_setup
    with pytest.raises(ValueError):
        run_strategy(StrategyConfig(strategy="reuse"), copy.deepcopy(student), copy.deepcopy(bags), ds.channel_means)


def test_strategy_config_validation():
    with pytest.raises(ValueError):
        StrategyConfig(strategy="finetune-all")
    with pytest.raises(ValueError):
        StrategyConfig(k=0)
    with pytest.raises(ValueError):
        StrategyConfig(label_smoothing=1.0)


def test_head_rejects_bad_shapes():
    head = AttentionMILHead(4, 3, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        head(Tensor(np.zeros(4, np.float32)))


def test_every_head_parameter_receives_gradient():
    head = small_head(3)
    out = head(Tensor(feats(3, 5)))
    (out * Tensor(np.array([0.7, -1.3]))).sum().backward()
    for name, p in head.named_parameters():
        assert p.grad is not None and np.abs(p.grad).max() > 0, name
