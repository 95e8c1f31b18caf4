"""Feature distillation: loss, training loop and checkpoints."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data.augment import AugmentSpec, augment
from .data.preprocess import preprocess_batch
from .io import load_arrays, save_arrays
from .models import FileTeacher, ModelSpec, RandomTeacher, build_model
from .optim import AdamW, lr_at
from .tensor import NonFiniteError, Tensor, no_grad
from .tensor import functional as F
from .tensor import nn


@dataclass(frozen=True)
class DistillConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-2
    eps: float = 1e-8
    warmup_steps: int = 200
    total_steps: int = 2000
    batch_size: int = 64
    tau: float = 1.0
    seed: int = 0
    teacher_seed: int = 1234
    checkpoint_every: int = 500
    smooth_window: int = 50
    augment: bool = False

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} > total_steps {self.total_steps}")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def distill_loss(f_t, f_s: Tensor, tau: float = 1.0, parts: bool = False):
    """``MSE(F_t, F_s) + KL(softmax(F_t / tau) || softmax(F_s / tau))``.

    Works on single vectors or ``N x D`` batches; the KL is summed over
    features and averaged over the batch, MSE is the mean over all entries.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    f_t = f_t if isinstance(f_t, Tensor) else Tensor(np.asarray(f_t, dtype=f_s.dtype))
    if f_t.shape != f_s.shape:
        raise ValueError(f"feature shapes differ: teacher {f_t.shape} vs student {f_s.shape}")
    mse = ((f_s - f_t) ** 2).mean()
    log_pt = F.log_softmax(f_t * (1.0 / tau), axis=-1)
    log_ps = F.log_softmax(f_s * (1.0 / tau), axis=-1)
    kl = (log_pt.exp() * (log_pt - log_ps)).sum(axis=-1)
    kl = kl.mean() if kl.ndim else kl
    total = mse + kl
    return (total, mse, kl) if parts else total


def smoothed(values, window: int) -> np.ndarray:
    """Trailing moving average (shorter at the start)."""
    v = np.asarray(values, dtype=np.float64)
    if not len(v):
        return v
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def assert_update_set(model: nn.Module, opt: AdamW) -> None:
    """Frozen parameters must be outside the optimizer and carry no gradient."""
    updated = {id(p) for p in opt.params}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            if id(p) in updated:
                raise RuntimeError(f"frozen parameter {name} is in the optimizer's update set")
            if p.grad is not None:
                raise RuntimeError(f"frozen parameter {name} received a gradient")


@dataclass
class DistillResult:
    model: nn.Module
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    window: int = 50

    @property
    def smoothed(self) -> np.ndarray:
        return smoothed(self.losses, self.window)

    def reduction(self) -> float:
        """1 - final smoothed loss / initial loss."""
        return 1.0 - self.smoothed[-1] / self.losses[0]


def _teacher_features(teacher, images: np.ndarray, ids, batch: int = 256) -> np.ndarray:
    if isinstance(teacher, FileTeacher):
        return np.asarray(teacher(ids).data)
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(teacher(Tensor(images[i : i + batch])).data)
    return np.concatenate(out)


def distill_train(
    spec: ModelSpec,
    data,
    cfg: DistillConfig,
    teacher=None,
    out_dir=None,
    split: str | None = "train",
    log=None,
) -> DistillResult:
    """AdamW distillation of a student built from ``spec`` onto ``teacher``.

    ``data`` is a patch-level dataset. Without augmentation the frozen
    extractor's outputs and the teacher's features are computed once and
    reused; with it both are recomputed per batch.
    """
    idx = data.indices(split) if split else data.indices()
    if not len(idx):
        raise ValueError(f"no samples in split {split!r}")
    images = data.images[idx]
    ids = [data.ids[i] for i in idx]
    mean = data.channel_means
    x_all = preprocess_batch(images, mean, spec.input_size)

    if teacher is None:
        teacher = RandomTeacher(spec.with_(variant="teacher-frozen-random"), rng=np.random.default_rng(cfg.teacher_seed))
    if not cfg.augment:
        t_all = _teacher_features(teacher, x_all, ids).astype(np.float32)
        if t_all.shape[1] != spec.teacher_dim:
            raise ValueError(f"teacher width {t_all.shape[1]} != spec.teacher_dim {spec.teacher_dim}")

    model = build_model(spec, seed=cfg.seed)
    model.train()
    cache = None
    if not cfg.augment and spec.variant == "fpd" and spec.frozen_extractor:
        with no_grad():
            cache = np.concatenate([model.extract(Tensor(x_all[i : i + 256])).data for i in range(0, len(x_all), 256)])

    opt = AdamW(model.trainable_parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    aug_spec = AugmentSpec() if cfg.augment else None
    result = DistillResult(model, window=cfg.smooth_window)
    order, pos = rng.permutation(len(idx)), 0
    out_dir = Path(out_dir) if out_dir is not None else None

    for step in range(1, cfg.total_steps + 1):
        if pos + cfg.batch_size > len(order):
            order, pos = rng.permutation(len(idx)), 0
        b = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        lr = lr_at(step, cfg.lr, cfg.warmup_steps, cfg.total_steps)
        opt.zero_grad()
        try:
            if cfg.augment:
                aug = np.stack([augment(images[i], aug_spec, rng)[0] for i in b])
                xb = preprocess_batch(aug, mean, spec.input_size)
                f_t = Tensor(_teacher_features(teacher, xb, [ids[i] for i in b]).astype(np.float32))
                f_s = model(Tensor(xb))
            else:
                f_t = Tensor(t_all[b])
                f_s = model.project(Tensor(cache[b])) if cache is not None else model(Tensor(x_all[b]))
            loss = distill_loss(f_t, f_s, cfg.tau)
            loss.backward()
        except NonFiniteError as e:
            raise NonFiniteError(f"non-finite distillation loss at step {step} (lr={lr:.3g}): {e}") from e
        assert_update_set(model, opt)
        opt.step(lr)
        result.losses.append(float(loss.item()))
        result.lrs.append(lr)
        if log is not None and (step % 100 == 0 or step == 1):
            log(f"step {step} loss {result.losses[-1]:.5f} smoothed {result.smoothed[-1]:.5f} lr {lr:.3g}")
        if out_dir is not None and (step % cfg.checkpoint_every == 0 or step == cfg.total_steps):
            result.checkpoints.append(save_checkpoint(out_dir / f"student_step{step:06d}", model, spec, cfg, step, result))
    return result


def save_checkpoint(path, model: nn.Module, spec: ModelSpec, cfg: DistillConfig | None, step: int, result=None) -> Path:
    meta = {
        "kind": "student-checkpoint",
        "model_spec": spec.to_dict(),
        "distill_config": cfg.to_dict() if cfg is not None else None,
        "step": step,
    }
    if result is not None and result.losses:
        meta["loss"] = result.losses[-1]
        meta["smoothed_loss"] = float(result.smoothed[-1])
    return save_arrays(path, model.state_dict(), meta)


def load_checkpoint(path):
    """Returns ``(model, meta)``."""
    state, meta = load_arrays(path)
    if meta.get("kind") != "student-checkpoint":
        raise ValueError(f"{path} is not a student checkpoint")
    spec = ModelSpec.from_dict(meta["model_spec"])
    model = build_model(spec)
    model.load_state_dict(state)
    return model, meta


def checkpoint_bytes(path) -> bytes:
    p = Path(path)
    base = p.with_suffix("") if p.suffix in (".json", ".bin") else p
    return base.with_suffix(".json").read_bytes() + base.with_suffix(".bin").read_bytes()


__all__ = [
    "DistillConfig",
    "DistillResult",
    "assert_update_set",
    "distill_loss",
    "distill_train",
    "load_checkpoint",
    "save_checkpoint",
    "smoothed",
]
