"""Slide-level multiple-instance learning.

A gated-attention head pools instance features into one bag embedding and
classifies it. Three ways to get a slide classifier from a distilled
student:

* ``reuse``: plug the student's features into a head trained on teacher
  features. Nothing trains.
* ``retrain``: freeze the student, train a new head on its features.
* ``etc``: tune student (minus its frozen extractor) and head end to end on
  a capped, informativeness-ranked subset of instances per slide, then
  freeze the tuned student and train a fresh head on all instances.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data.preprocess import preprocess_batch
from .metrics import MetricsRecord, compute_metrics
from .optim import AdamW
from .tensor import Tensor, no_grad
from .tensor import functional as F
from .tensor import nn
from .tensor.nn import DEFAULT_DTYPE

STRATEGIES = ("reuse", "retrain", "etc")


@dataclass
class Bag:
    slide_id: str
    coords: np.ndarray  # K x 2, (x, y) of each patch's top-left corner
    label: int
    split: str = "train"
    patch_size: int = 256
    height: int | None = None
    width: int | None = None
    patches: np.ndarray | None = None  # K x S x S x 3 uint8
    features: dict = field(default_factory=dict)  # name -> K x D
    tumor: np.ndarray | None = None  # ground truth, never used for training

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        if len(self.coords) < 1:
            raise ValueError(f"bag {self.slide_id} has no instances")
        if self.patches is not None and len(self.patches) != len(self.coords):
            raise ValueError(f"bag {self.slide_id}: {len(self.patches)} patches for {len(self.coords)} coordinates")
        for name, f in self.features.items():
            if len(f) != len(self.coords):
                raise ValueError(f"bag {self.slide_id}: {name} features have {len(f)} rows for {len(self)} instances")
        if self.height is not None and self.width is not None:
            check_coords(self.coords, self.patch_size, self.height, self.width)

    def __len__(self) -> int:
        return len(self.coords)


def check_coords(coords: np.ndarray, patch_size: int, height: int, width: int) -> None:
    c = np.asarray(coords)
    bad = (c[:, 0] < 0) | (c[:, 1] < 0) | (c[:, 0] + patch_size > width) | (c[:, 1] + patch_size > height)
    if bad.any():
        raise ValueError(f"patch at {tuple(c[np.argmax(bad)])} outside the {height}x{width} slide")


def bags_from_dataset(ds, split: str | None = None) -> list[Bag]:
    bags = []
    for row in ds.slides:
        if split is not None and row["split"] != split:
            continue
        sid = row["id"]
        bags.append(
            Bag(
                slide_id=sid,
                coords=ds.store.get(sid, "coords"),
                label=int(row["label"]),
                split=row["split"],
                patch_size=row["patch_size"],
                height=row["height"],
                width=row["width"],
                patches=ds.store.get(sid, "patches"),
                tumor=ds.store.get(sid, "tumor").astype(bool),
            )
        )
    return bags


# -- head -------------------------------------------------------------------------------


class AttentionMILHead(nn.Module):
    """Gated attention pooling: ``a_i = w^T (tanh(V h_i) * sigmoid(U h_i))``, softmax over the bag."""

    def __init__(self, in_dim: int, hidden: int = 64, num_classes: int = 2, *, rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.in_dim, self.hidden, self.num_classes = in_dim, hidden, num_classes
        self.embed = nn.Linear(in_dim, hidden, rng=rng, dtype=dtype)
        self.attn_v = nn.Linear(hidden, hidden, rng=rng, dtype=dtype)
        self.attn_u = nn.Linear(hidden, hidden, rng=rng, dtype=dtype)
        self.attn_w = nn.Linear(hidden, 1, bias=False, rng=rng, dtype=dtype)  # a bias would cancel in the softmax
        self.classifier = nn.Linear(hidden, num_classes, rng=rng, dtype=dtype)

    def scores(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        """Embedded instances ``N x h`` and raw attention scores ``N``."""
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"expected a non-empty N x D bag, got {feats.shape}")
        if feats.shape[1] != self.in_dim:
            raise ValueError(f"head expects {self.in_dim}-d features, got {feats.shape[1]}")
        h = self.embed(feats).relu()
        gate = self.attn_v(h).tanh() * self.attn_u(h).sigmoid()
        return h, self.attn_w(gate).reshape(-1)

    def pool(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        h, s = self.scores(feats)
        w = F.softmax(s, axis=0)
        return (w.reshape(1, -1) @ h).reshape(-1), w

    def forward(self, feats: Tensor, return_attention: bool = False):
        emb, w = self.pool(feats)
        logits = self.classifier(emb)
        return (logits, w) if return_attention else logits


def attention_pool(bag_features, head: AttentionMILHead) -> tuple[Tensor, Tensor]:
    feats = bag_features if isinstance(bag_features, Tensor) else Tensor(np.asarray(bag_features, dtype=head.embed.weight.dtype))
    if feats.shape[0] < 1:
        raise ValueError("empty bag")
    return head.pool(feats)


# -- audit -------------------------------------------------------------------------------


def param_hashes(module: nn.Module, prefix: str = "") -> dict[str, str]:
    return {f"{prefix}{n}": hashlib.sha256(np.ascontiguousarray(p.data).tobytes()).hexdigest() for n, p in module.named_parameters()}


def changed(before: dict, after: dict) -> set:
    return {k for k in before if before[k] != after.get(k)}


# -- config --------------------------------------------------------------------------------


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str = "etc"
    k: int = 512
    student_lr: float = 1e-5
    head_lr: float = 5e-3
    batch_size: int = 16
    label_smoothing: float = 0.1
    epochs: int = 20
    etc_epochs: int = 5
    scorer_epochs: int = 20
    hidden: int = 64
    num_classes: int = 2
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# -- features ----------------------------------------------------------------------------


def extract_features(model, bags: list[Bag], mean, input_size: int, name: str, batch: int = 256) -> None:
    """Run a frozen ``model`` over every bag's patches and store ``bag.features[name]``."""
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    with no_grad():
        for bag in bags:
            x = preprocess_batch(bag.patches, mean, input_size)
            out = [model(Tensor(x[i : i + batch])).data for i in range(0, len(x), batch)]
            bag.features[name] = np.concatenate(out).astype(np.float32)
    if was_training:
        model.train()


def _extract_cache(student, bags: list[Bag], mean, input_size: int) -> dict:
    """Frozen-extractor outputs per bag, so end-to-end steps only run the trainable part."""
    out = {}
    with no_grad():
        for bag in bags:
            out[bag.slide_id] = student.extract(Tensor(preprocess_batch(bag.patches, mean, input_size))).data
    return out


# -- head training ---------------------------------------------------------------------------


def bag_probabilities(head: AttentionMILHead, bags: list[Bag], name: str) -> np.ndarray:
    with no_grad():
        return np.stack([F.softmax(head(Tensor(b.features[name])), axis=-1).data for b in bags])


def evaluate(head, bags: list[Bag], name: str, split: str = "test", epoch=None) -> MetricsRecord:
    probs = bag_probabilities(head, bags, name)
    return compute_metrics(probs, [b.label for b in bags], split, epoch)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def train_head(
    bags: list[Bag],
    name: str,
    cfg: StrategyConfig,
    val: list[Bag] | None = None,
    epochs: int | None = None,
    seed: int | None = None,
    log=None,
):
    """Train a fresh head on precomputed ``bag.features[name]``.

    Keeps the weights of the epoch with the highest validation AUC, then
    accuracy (earliest on ties). Returns ``(head, history)``.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0x4EAD])
    dim = bags[0].features[name].shape[1]
    head = AttentionMILHead(dim, cfg.hidden, cfg.num_classes, rng=rng)
    head.initial_hashes = param_hashes(head, "head.")
    opt = AdamW(head.trainable_parameters(), cfg.head_lr, cfg.betas, cfg.eps, cfg.weight_decay)
    history = []
    best = ((-1.0, -1.0), None, None)
    for epoch in range(1, (epochs or cfg.epochs) + 1):
        losses = []
        for b in _batches(len(bags), cfg.batch_size, rng):
            opt.zero_grad()
            loss = None
            for i in b:
                li = F.cross_entropy(head(Tensor(bags[i].features[name])), [bags[i].label], cfg.label_smoothing)
                loss = li if loss is None else loss + li
            loss = loss * (1.0 / len(b))
            loss.backward()
            opt.step()
            losses.append(loss.item())
        rec = {"epoch": epoch, "loss": float(np.mean(losses))}
        if val:
            m = evaluate(head, val, name, "val", epoch)
            rec["val_auc"], rec["val_acc"] = m.auc, m.acc
            if (m.auc, m.acc) > best[0]:
                best = ((m.auc, m.acc), epoch, {k: v.copy() for k, v in head.state_dict().items()})
        history.append(rec)
        if log is not None:
            log(json.dumps(rec))
    if best[2] is not None:
        head.load_state_dict(best[2])
    head.best_epoch = best[1] if best[1] is not None else len(history)
    return head, history


# -- instance selection ----------------------------------------------------------------------


def top_k(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties broken by lower index; all indices if ``len <= k``."""
    s = np.asarray(scores, dtype=np.float64)
    if len(s) <= k:
        return np.arange(len(s))
    order = np.lexsort((np.arange(len(s)), -s))
    return np.sort(order[:k])


def ib_select(bag: Bag, k: int, scorer: AttentionMILHead, name: str = "teacher") -> np.ndarray:
    """Top-``k`` instances by the scorer's attention on the bag's teacher features."""
    if name not in bag.features:
        raise KeyError(f"bag {bag.slide_id} has no {name!r} features")
    if len(bag) <= k:
        return np.arange(len(bag))
    with no_grad():
        _, s = scorer.scores(Tensor(bag.features[name]))
    return top_k(s.data, k)


def train_scorer(bags: list[Bag], cfg: StrategyConfig, val=None, name: str = "teacher"):
    """Small attention-MIL model on teacher features; its attention ranks instances."""
    head, _ = train_head(bags, name, cfg, val, epochs=cfg.scorer_epochs, seed=cfg.seed + 7919)
    return head


# -- strategies ---------------------------------------------------------------------------------


@dataclass
class StrategyResult:
    strategy: str
    head: AttentionMILHead
    student: nn.Module
    metrics: dict
    audit: dict
    history: list = field(default_factory=list)
    selected: dict = field(default_factory=dict)


class FixedAdapter(nn.Module):
    """Frozen seeded linear map for feeding D-dim student features to a D_t-dim head."""

    def __init__(self, in_dim: int, out_dim: int, seed: int = 0):
        super().__init__()
        self.lin = nn.Linear(in_dim, out_dim, bias=False, rng=np.random.default_rng([seed, 0xADA]))
        self.freeze()

    def forward(self, x):
        return self.lin(x)


def _splits(bags):
    return [b for b in bags if b.split == "train"], [b for b in bags if b.split == "val"], [b for b in bags if b.split == "test"]


def run_strategy(
    cfg: StrategyConfig,
    student: nn.Module,
    bags: list[Bag],
    mean,
    teacher_head: AttentionMILHead | None = None,
    scorer: AttentionMILHead | None = None,
    log=None,
) -> StrategyResult:
    """Fine-tune per ``cfg.strategy`` and evaluate on the test bags.

    ``mean`` is the dataset channel mean used for preprocessing. ``etc``
    needs ``scorer`` (see :func:`train_scorer`) unless every bag has at most
    ``k`` instances.
    """
    train, val, test = _splits(bags)
    size = student.spec.input_size
    student_hash0 = param_hashes(student, "student.")

    if cfg.strategy == "reuse":
        if teacher_head is None:
            raise ValueError("reuse needs a head trained on teacher features")
        student.freeze()
        head = teacher_head
        head_hash0 = param_hashes(head, "head.")
        extract_features(student, bags, mean, size, "student")
        if teacher_head.in_dim != bags[0].features["student"].shape[1]:
            adapter = FixedAdapter(bags[0].features["student"].shape[1], teacher_head.in_dim, cfg.seed)
            with no_grad():
                for b in bags:
                    b.features["student"] = adapter(Tensor(b.features["student"])).data
        history = []
        allowed = set()
    elif cfg.strategy == "retrain":
        student.freeze()
        extract_features(student, bags, mean, size, "student")
        head, history = train_head(train, "student", cfg, val, log=log)
        head_hash0 = head.initial_hashes
        allowed = set(head_hash0)
    else:
        head, history, selected, e2e_changed = _etc(cfg, student, train, val, mean, scorer, log)
        head_hash0 = head.initial_hashes
        extract_features(student, bags, mean, size, "student")
        allowed = {n for n in student_hash0 if not n.startswith("student.extractor.")} | set(head_hash0)

    student_hash1 = param_hashes(student, "student.")
    head_hash1 = param_hashes(head, "head.")
    updated = changed(student_hash0, student_hash1) | changed(head_hash0, head_hash1)
    if cfg.strategy == "etc":
        updated |= e2e_changed
    if not updated <= allowed:
        raise RuntimeError(f"{cfg.strategy}: parameters outside the allowed set changed: {sorted(updated - allowed)[:5]}")
    audit = {
        "student_changed": sorted(changed(student_hash0, student_hash1)),
        "head_changed": sorted(changed(head_hash0, head_hash1)),
        "student_hash_before": _digest(student_hash0),
        "student_hash_after": _digest(student_hash1),
        "head_hash_before": _digest(head_hash0),
        "head_hash_after": _digest(head_hash1),
    }
    metrics = {"test": evaluate(head, test, "student", "test").to_dict()}
    if val:
        metrics["val"] = evaluate(head, val, "student", "val").to_dict()
    result = StrategyResult(cfg.strategy, head, student, metrics, audit, history)
    if cfg.strategy == "etc":
        result.selected = selected
    return result


def _digest(hashes: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(hashes):
        h.update(k.encode())
        h.update(hashes[k].encode())
    return h.hexdigest()


def _etc(cfg: StrategyConfig, student, train, val, mean, scorer, log):
    size = student.spec.input_size
    selected = {}
    for b in train:
        if len(b) > cfg.k:
            if scorer is None:
                raise ValueError("etc needs an instance scorer when bags exceed k instances")
            selected[b.slide_id] = ib_select(b, cfg.k, scorer)
        else:
            selected[b.slide_id] = np.arange(len(b))

    # end-to-end stage: batch statistics stay fixed (eval mode) while weights train
    student.eval()
    frozen_ext = getattr(student, "extractor", None)
    cache = _extract_cache(student, train, mean, size) if frozen_ext is not None and frozen_ext.frozen else None
    rng = np.random.default_rng([cfg.seed, 0xE7C])
    dim = student.spec.teacher_dim
    head = AttentionMILHead(dim, cfg.hidden, cfg.num_classes, rng=rng)
    before = {**param_hashes(student, "student."), **param_hashes(head, "e2e_head.")}
    allowed = {n for n in before if not n.startswith("student.extractor.")}
    opt = AdamW([(student.trainable_parameters(), cfg.student_lr / cfg.head_lr), (head.trainable_parameters(), 1.0)], cfg.head_lr, cfg.betas, cfg.eps, cfg.weight_decay)
    for epoch in range(1, cfg.etc_epochs + 1):
        losses = []
        for idx in _batches(len(train), cfg.batch_size, rng):
            opt.zero_grad()
            loss = None
            for i in idx:
                b = train[i]
                sel = selected[b.slide_id]
                if cache is not None:
                    feats = student.project(Tensor(cache[b.slide_id][sel]))
                else:
                    feats = student(Tensor(preprocess_batch(b.patches[sel], mean, size)))
                li = F.cross_entropy(head(feats), [b.label], cfg.label_smoothing)
                loss = li if loss is None else loss + li
            loss = loss * (1.0 / len(idx))
            loss.backward()
            opt.step()
            step_hash = {**param_hashes(student, "student."), **param_hashes(head, "e2e_head.")}
            moved = changed(before, step_hash)
            if not moved <= allowed:
                raise RuntimeError(f"etc: frozen parameters changed: {sorted(moved - allowed)[:5]}")
            losses.append(loss.item())
        if log is not None:
            log(json.dumps({"stage": "e2e", "epoch": epoch, "loss": float(np.mean(losses))}))
    e2e_changed = changed(before, {**param_hashes(student, "student."), **param_hashes(head, "e2e_head.")})
    e2e_changed = {n.replace("e2e_head.", "head.") for n in e2e_changed}

    # freeze the tuned student and train a fresh head on every instance
    student.freeze()
    extract_features(student, train + val, mean, size, "student")
    new_head, history = train_head(train, "student", cfg, val, log=log)
    return new_head, history, selected, e2e_changed


def clam_eval(student, head: AttentionMILHead, bags: list[Bag], mean=None, name: str = "student"):
    """``(ACC, AUC, per-slide positive-class scores)``; extracts features first if ``mean`` is given."""
    if mean is not None:
        extract_features(student, bags, mean, student.spec.input_size, name)
    probs = bag_probabilities(head, bags, name)
    m = compute_metrics(probs, [b.label for b in bags])
    return m.acc, m.auc, probs[:, -1].tolist()


def attention_weights(head: AttentionMILHead, bag: Bag, name: str = "student") -> np.ndarray:
    with no_grad():
        _, w = head.pool(Tensor(bag.features[name]))
    return w.data.astype(np.float64)


# -- heatmaps -------------------------------------------------------------------------------------


def normalized_weights(weights) -> tuple[np.ndarray, bool]:
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = w.min(), w.max()
    if hi - lo <= 0:
        return np.full_like(w, 0.5), True
    return (w - lo) / (hi - lo), False


def export_heatmap(bag: Bag, weights, path, height: int | None = None, width: int | None = None) -> Path:
    """Write ``<path>.pgm`` (one 8-bit cell per patch grid position) and ``<path>.json``.

    Cells without a patch are 0 in the raster and absent from the sidecar.
    """
    height = height if height is not None else bag.height
    width = width if width is not None else bag.width
    if height is None or width is None:
        raise ValueError("slide geometry is required")
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != len(bag):
        raise ValueError(f"{len(w)} weights for {len(bag)} instances")
    ps = bag.patch_size
    check_coords(bag.coords, ps, height, width)
    norm, degenerate = normalized_weights(w)
    rows, cols = height // ps, width // ps
    grid = np.zeros((rows, cols), dtype=np.float64)
    for (x, y), v in zip(bag.coords, norm):
        grid[y // ps, x // ps] = v
    raster = np.round(grid * 255).astype(np.uint8)
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    with open(base.with_suffix(".pgm"), "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode())
        fh.write(raster.tobytes())
    sidecar = {
        "version": 1,
        "slide_id": bag.slide_id,
        "grid": [rows, cols],
        "patch_size": ps,
        "degenerate": degenerate,
        "cells": [
            {"x": int(x), "y": int(y), "weight": float(wi), "normalized": float(n)}
            for (x, y), wi, n in zip(bag.coords, w, norm)
        ],
    }
    base.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return base


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    cols, rows = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)
