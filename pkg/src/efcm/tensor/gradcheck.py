"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import NonFiniteError, Tensor, no_grad


def _scalar(out) -> float:
    if not isinstance(out, Tensor):
        raise TypeError("checked function must return a Tensor")
    if out.size != 1:
        raise ValueError(f"checked function must return a scalar, got shape {out.shape}")
    val = float(out.data.reshape(()))
    if not np.isfinite(val):
        raise NonFiniteError("non-finite function value during grad_check")
    return val


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` is called as ``f(*xs)`` and must return a scalar. Every coordinate
    of every tensor in ``x`` is perturbed in place by ``+-eps``. Relative
    error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps exactly-zero
    gradients (roundoff-level differences) from reading as large errors. With ``max_coords`` only
    that many seeded random coordinates per tensor are perturbed (tensors
    with fewer entries are checked exhaustively).
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 tensors, got {t.dtype}")
    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        out = f(*xs)
        _scalar(out)
        out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
        worst = 0.0
        pick = np.random.default_rng([seed, 0xC0DE])
        with no_grad():
            for t, ga in zip(xs, analytic):
                flat = t.data.reshape(-1)
                gflat = ga.reshape(-1)
                coords = range(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = sorted(pick.choice(flat.size, size=max_coords, replace=False))
                for i in coords:
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = _scalar(f(*xs))
                    flat[i] = orig - eps
                    fm = _scalar(f(*xs))
                    flat[i] = orig
                    num = (fp - fm) / (2.0 * eps)
                    a = gflat[i]
                    err = abs(a - num) / max(abs(a), abs(num), floor)
                    worst = max(worst, err)
    finally:
        for t, s in zip(xs, saved):
            t.requires_grad = s
            t.grad = None
    return worst


def projected(f: Callable[..., Tensor], seed: int = 0) -> Callable[..., Tensor]:
    """Wrap a tensor-valued ``f`` into the scalar ``sum(R * f(...))`` with fixed random ``R``."""
    cache: dict[tuple, np.ndarray] = {}

    def g(*xs):
        out = f(*xs)
        key = out.shape
        if key not in cache:
            cache[key] = np.random.default_rng([seed, 0x5EED]).standard_normal(key)
        return (out * Tensor(cache[key])).sum()

    return g
