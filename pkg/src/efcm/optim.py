"""AdamW and the linear-warmup / cosine-decay learning-rate schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


def lr_at(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Learning rate for 1-indexed ``step``.

    ``base * step / warmup`` up to ``warmup``, then cosine from ``base`` down to
    0 at ``total``. Steps past ``total`` stay at 0.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup > total:
        raise ValueError(f"warmup {warmup} exceeds total steps {total}")
    if warmup > 0 and step <= warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr
    progress = min(1.0, (step - warmup) / (total - warmup))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay: ``p -= lr * (wd * p + m_hat / (sqrt(v_hat) + eps))``.

    Parameter groups are ``(params, lr_scale)`` pairs so the student and the
    head can train at different rates from one schedule.
    """

    def __init__(
        self,
        params: Sequence[Tensor] | Sequence[tuple[Sequence[Tensor], float]],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ):
        params = list(params)
        if params and isinstance(params[0], tuple):
            groups = [(list(ps), float(scale)) for ps, scale in params]
        else:
            groups = [(params, 1.0)]
        seen = set()
        for ps, _ in groups:
            for p in ps:
                if not p.requires_grad:
                    raise ValueError("optimizer received a frozen parameter")
                if id(p) in seen:
                    raise ValueError("parameter appears twice in the optimizer")
                seen.add(id(p))
        self.groups = groups
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for ps, _ in groups for p in ps}
        self.v = {id(p): np.zeros_like(p.data) for ps, _ in groups for p in ps}

    @property
    def params(self) -> list[Tensor]:
        return [p for ps, _ in self.groups for p in ps]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for ps, scale in self.groups:
            step_lr = lr * scale
            for p in ps:
                if p.grad is None:
                    continue
                g = p.grad.astype(p.data.dtype, copy=False)
                m, v = self.m[id(p)], self.v[id(p)]
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
                p.data = (p.data - step_lr * (self.wd * p.data + upd)).astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict:
        out = {}
        for i, p in enumerate(self.params):
            out[f"m.{i}"] = self.m[id(p)]
            out[f"v.{i}"] = self.v[id(p)]
        return out
