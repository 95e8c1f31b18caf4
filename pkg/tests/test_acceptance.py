"""Acceptance suite: one recorded PASS/FAIL line per headline criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary block at
the end of the pytest output lists every criterion with its measured value.
"""

import copy
import time

import numpy as np
import pytest
from oracles import identity_scan, identity_stack, max_grad_error, pair_count_auc, small_block, small_head, small_scan, small_stack

from efcm.costs import conv_mac, count_params
from efcm.data import PARAM_SETS, AugmentSpec, PatchDataConfig, SlideDataConfig, augment, generate_patches, generate_slides, sample_params
from efcm.distill import DistillConfig, distill_loss, distill_train
from efcm.metrics import binary_auc
from efcm.mil import (
    StrategyConfig,
    attention_pool,
    attention_weights,
    bags_from_dataset,
    extract_features,
    run_strategy,
    train_head,
    train_scorer,
)
from efcm.models import ModelSpec, RandomTeacher, build_model
from efcm.profiler import FPSProtocol, gflops, measure_fps
from efcm.scan import SCAN, ScanConfig, scan_forward, transformer_block
from efcm.tensor import Tensor

# desk-scale student used for the training criteria
DESK = ModelSpec("fpd", input_size=32, dim=64, depth=2, teacher_dim=64)
SEEDS = range(10)


def test_param_grid(criterion):
    ref = {(192, 3): 2.67e6, (384, 2): 5.99e6, (384, 3): 7.88e6, (384, 4): 9.79e6, (576, 3): 15.89e6}
    t0 = time.perf_counter()
    got = {k: count_params(ModelSpec("fpd", dim=k[0], depth=k[1], teacher_dim=1024)) for k in ref}
    dt = time.perf_counter() - t0
    worst = max(abs(got[k] - v) / v for k, v in ref.items())
    detail = ", ".join(f"{d}x{n}={got[(d, n)] / 1e6:.3f}M" for d, n in ref) + f"; worst {worst:.2%}; {dt:.3f}s"
    criterion("parameter grid within 5%, < 1 s", worst < 0.05 and dt < 1.0, detail)


def test_student_totals(criterion):
    fpd = count_params(ModelSpec("fpd"))
    vfd = count_params(ModelSpec("vfd"))
    ok = abs(fpd - 7.88e6) / 7.88e6 < 0.05 and abs(vfd - 9.6e6) / 9.6e6 < 0.05
    criterion("FPD 7.88M and VFD 9.6M within 5%", ok, f"FPD {fpd:,}, VFD {vfd:,}")


def test_selection_weights_sum_to_one(criterion):
    scan = SCAN(ScanConfig(64, 32, 32), rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1000, 64, 4, 4)).astype(np.float32) * rng.uniform(0.1, 10.0, (1000, 1, 1, 1)).astype(np.float32)
    _, parts = scan(Tensor(x), return_parts=True)
    err = float(np.abs(parts["a"].data.astype(np.float64) + parts["b"].data - 1.0).max())
    criterion("a + b = 1 within 1e-6 on 1,000 inputs", err <= 1e-6, f"max |a+b-1| = {err:.2e}")


def _grad_cases(seed):
    rng = np.random.default_rng([seed, 1])
    x = rng.standard_normal((2, 8, 3, 3))
    scan, blk, stack, head = small_scan(seed), small_block(seed), small_stack(seed).eval(), small_head(seed)
    t, s = rng.standard_normal((3, 7)), rng.standard_normal((3, 7))
    return {
        "scan_forward": lambda: max_grad_error(lambda v: scan_forward(v, scan), scan, x, seed, max_coords=8),
        "transformer_block": lambda: max_grad_error(lambda v: transformer_block(v, blk), blk, x, seed, max_coords=8),
        "transscan_stack": lambda: max_grad_error(stack, stack, x, seed, max_coords=3),
        "distill_loss": lambda: max_grad_error(
            lambda v: distill_loss(Tensor(t), v, tau=1.5 + seed % 3).reshape(1), _NoParams(), s, seed
        ),
        "attention_pool": lambda: max_grad_error(
            lambda v: attention_pool(v, head)[0], head, rng.standard_normal((4, 6)), seed, max_coords=10
        ),
    }


class _NoParams:
    def parameters(self):
        return []


def test_gradient_suite(criterion):
    t0 = time.perf_counter()
    worst = {}
    for seed in SEEDS:
        for name, run in _grad_cases(seed).items():
            worst[name] = max(worst.get(name, 0.0), run())
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and dt < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {len(SEEDS)} seeds; {dt:.1f}s"
    criterion("float64 finite-difference gradients < 1e-4, < 2 min", ok, detail)


def test_identity_algebra(criterion):
    x = np.random.default_rng(2).standard_normal((2, 8, 5, 5))
    triple = np.array_equal(identity_scan(8, 2, 4).eval()(Tensor(x)).data, 3 * x)
    powers, rel = True, 0.0
    for k in (1, 2, 3):
        out = identity_stack(8, k).eval()(Tensor(x)).data
        ref = x
        for _ in range(k):
            ref = 3 * ref  # each block triples exactly; 27 * x may round differently
        powers &= np.array_equal(out, ref)
        rel = max(rel, float(np.abs(out / (3**k * x) - 1).max()))
    detail = f"3X exact: {triple}; depth 1..3 equal to repeated tripling: {powers}; max rel. diff to 3^k X {rel:.1e}"
    criterion("identity SCAN gives 3X, depth-k stack gives 3^k X", triple and powers and rel < 1e-15, detail)


@pytest.fixture(scope="session")
def distilled():
    data = generate_patches(PatchDataConfig(), seed=0)
    cfg = DistillConfig()
    t0 = time.perf_counter()
    a = distill_train(DESK, data, cfg)
    dt = time.perf_counter() - t0
    b = distill_train(DESK, data, cfg)
    return a, b, dt, cfg


def test_distillation_smoke(distilled, criterion):
    a, b, dt, cfg = distilled
    red = a.reduction()
    lr100 = a.lrs[99]
    same = a.losses == b.losses and all(
        np.array_equal(v, b.model.state_dict()[k]) for k, v in a.model.state_dict().items()
    )
    ok = red >= 0.5 and len(a.losses) == cfg.total_steps and lr100 == 0.5e-4 and same and dt < 600
    detail = f"reduction {red:.2%} in {len(a.losses)} steps; lr(100) = {lr100!r}; bit-identical rerun: {same}; {dt:.0f}s per run"
    criterion("distillation halves the smoothed loss, exact warmup lr, deterministic", ok, detail)


@pytest.fixture(scope="session")
def mil_results(distilled, tmp_path_factory):
    t0 = time.perf_counter()
    ds = generate_slides(SlideDataConfig(), tmp_path_factory.mktemp("slides"), seed=0)
    bags = bags_from_dataset(ds)
    mean = ds.channel_means
    teacher = RandomTeacher(DESK.with_(variant="teacher-frozen-random"), rng=np.random.default_rng(1234))
    extract_features(teacher, bags, mean, DESK.input_size, "teacher")
    train = [b for b in bags if b.split == "train"]
    val = [b for b in bags if b.split == "val"]
    base = StrategyConfig(k=512)
    scorer = train_scorer(train, base, val)
    teacher_head, _ = train_head(train, "teacher", base, val, seed=1)
    out = {}
    for strat in ("reuse", "retrain", "etc"):
        res = run_strategy(
            StrategyConfig(strategy=strat, k=512),
            copy.deepcopy(distilled[0].model),
            bags,
            mean,
            teacher_head=copy.deepcopy(teacher_head),
            scorer=scorer,
        )
        out[strat] = res
    dt = time.perf_counter() - t0
    return ds, bags, out, dt


def test_strategy_contracts(mil_results, criterion):
    _, _, res, _ = mil_results
    reuse, retrain, etc = res["reuse"].audit, res["retrain"].audit, res["etc"].audit
    ok_reuse = not reuse["student_changed"] and not reuse["head_changed"]
    ok_retrain = not retrain["student_changed"] and bool(retrain["head_changed"])
    ok_etc = (
        bool(etc["student_changed"])
        and not any(n.startswith("student.extractor.") for n in etc["student_changed"])
        and bool(etc["head_changed"])
    )
    detail = (
        f"reuse changed {len(reuse['student_changed'])}+{len(reuse['head_changed'])}; "
        f"retrain student {len(retrain['student_changed'])}, head {len(retrain['head_changed'])}; "
        f"etc student {len(etc['student_changed'])} (extractor 0), head {len(etc['head_changed'])}"
    )
    criterion("hash audit: reuse nothing, retrain head only, etc student-minus-extractor + head", ok_reuse and ok_retrain and ok_etc, detail)


def test_end_to_end_mil(mil_results, distilled, criterion):
    ds, bags, res, dt = mil_results
    etc = res["etc"]
    test_auc = etc.metrics["test"]["auc"]
    pos = [b for b in bags if b.split == "test" and b.label == 1]
    hits = [bool(b.tumor[int(np.argmax(attention_weights(etc.head, b)))]) for b in pos]
    rate = float(np.mean(hits))
    total = dt + distilled[2]
    n_tumor = sum(int(b.tumor.sum()) for b in bags if b.label == 1)
    n_tissue = sum(len(b) for b in bags if b.label == 1)
    ok = test_auc >= 0.90 and rate >= 0.8 and len(ds.slides) == 200 and total < 1200
    detail = (
        f"ETC test AUC {test_auc:.4f}, ACC {etc.metrics['test']['acc']:.3f}; argmax tumor {rate:.0%} of {len(pos)} positive test slides; "
        f"{len(ds.slides)} slides, tumor {n_tumor / n_tissue:.1%} of positive-slide patches; "
        f"reuse AUC {res['reuse'].metrics['test']['auc']:.3f}, retrain AUC {res['retrain'].metrics['test']['auc']:.3f}; {total:.0f}s"
    )
    criterion("ETC reaches AUC >= 0.90, argmax attention on tumor >= 80%, < 20 min", ok, detail)


def test_profiler_oracles(criterion):
    mac = conv_mac(64, 64, 3, 56, 56)
    exact = all(gflops(m) == 2 * m / 1e9 for m in (mac, 1, 3, 2_272_698_880, 10**12 + 7))
    protocol = FPSProtocol()
    fpd = measure_fps(build_model(ModelSpec("fpd")), (3, 224, 224), protocol)
    vfd = measure_fps(build_model(ModelSpec("vfd")), (3, 224, 224), protocol)
    ok = mac == 115_605_504 and exact and fpd.fps > vfd.fps
    detail = f"conv MAC {mac:,}; gflops bit-exact {exact}; FPS FPD {fpd.fps:.2f} vs VFD {vfd.fps:.2f} (batch 1, 10 warmup, median of 100)"
    criterion("profiler MAC oracle, GFLOPS convention, FPD faster than VFD", ok, detail)


def test_metrics_oracle(criterion):
    rng = np.random.default_rng(0)
    mismatches, checked = 0, 0
    for _ in range(2000):
        n = int(rng.integers(2, 13))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            continue
        scores = rng.choice(np.linspace(0, 1, 5), n) if rng.random() < 0.5 else rng.random(n)
        checked += 1
        mismatches += abs(binary_auc(scores, labels) - pair_count_auc(scores, labels)) > 1e-12
    hand = binary_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    criterion("AUC equals pair counting, hand case 0.75", mismatches == 0 and hand == 0.75, f"{checked} random instances, {mismatches} mismatches; hand case {hand}")


def test_augmentation_conformance(criterion):
    rng = np.random.default_rng(0)
    spec = AugmentSpec()
    bad = 0
    for _ in range(10_000):
        bad += sum(v not in PARAM_SETS[op] for op, v in sample_params(spec, rng).items())
    img = np.random.default_rng(1).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    bright = np.array_equal(augment(img, params={"brightness": 1.0})[0], img)
    once = augment(img, params={"flip": "L_R"})[0]
    twice = np.array_equal(augment(once, params={"flip": "L_R"})[0], img)
    once = augment(img, params={"flip": "T_B"})[0]
    twice &= np.array_equal(augment(once, params={"flip": "T_B"})[0], img)
    criterion("10,000 draws stay in the parameter sets; identities hold", bad == 0 and bright and twice, f"{bad} out-of-set values; brightness 1.0 identity {bright}; double flip identity {twice}")
