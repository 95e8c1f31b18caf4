"""SCAN selective-convolution attention and the TransScan block.

SCAN on a ``C x H' x W'`` map X:

    U~ = conv3x3(X, pad 1, dil 1, groups G)      U^ = conv3x3(X, pad 2, dil 2, groups G)
    U  = U~ + U^
    s  = mean_{H',W'} U                          z = relu(bn(fc(s)))   (fc: C -> d)
    a  = softmax([A z, B z])[0]                  b = 1 - a             (per channel)
    V  = a * U~ + b * U^
    U' = U * sigmoid(conv1x1_{C->1}(U))
    X' = X + U' + V

TransScan appends a pre-LN transformer encoder block over the H'*W'
positions (row-major, no positional embedding).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, stack
from .tensor import functional as F
from .tensor import nn
from .tensor.nn import DEFAULT_DTYPE


@dataclass(frozen=True)
class ScanConfig:
    channels: int
    groups: int = 32
    reduced_dim: int = 32
    kernel_size: int = 3

    def __post_init__(self):
        if self.channels < 1 or self.groups < 1 or self.channels % self.groups:
            raise ValueError(f"channels {self.channels} not divisible by groups {self.groups}")
        if self.reduced_dim < 1:
            raise ValueError("reduced_dim must be >= 1")


@dataclass(frozen=True)
class TransScanConfig:
    dim: int = 384
    depth: int = 3
    heads: int | None = None  # None -> max(1, dim // 64)
    mlp_ratio: int = 4
    groups: int = 32
    reduced_dim: int = 32

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.dim % self.num_heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.num_heads}")
        ScanConfig(self.dim, self.groups, self.reduced_dim)

    @property
    def num_heads(self) -> int:
        return self.heads if self.heads is not None else max(1, self.dim // 64)

    @property
    def scan(self) -> ScanConfig:
        return ScanConfig(self.dim, self.groups, self.reduced_dim)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected C x H x W or N x C x H x W, got {x.shape}")
    return x, False


class SCAN(nn.Module):
    def __init__(self, cfg: ScanConfig, *, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.cfg = cfg
        c, g, d, k = cfg.channels, cfg.groups, cfg.reduced_dim, cfg.kernel_size
        self.branch1 = nn.Conv2d(c, c, k, padding=1, dilation=1, groups=g, rng=rng, dtype=dtype)
        self.branch2 = nn.Conv2d(c, c, k, padding=2, dilation=2, groups=g, rng=rng, dtype=dtype)
        self.fc = nn.Conv2d(c, d, 1, bias=False, rng=rng, dtype=dtype)
        self.bn = nn.BatchNorm(d, dtype=dtype)
        self.A = nn.Conv2d(d, c, 1, bias=False, rng=rng, dtype=dtype)
        self.B = nn.Conv2d(d, c, 1, bias=False, rng=rng, dtype=dtype)
        self.spatial = nn.Conv2d(c, 1, 1, rng=rng, dtype=dtype)

    def _check(self, x: Tensor) -> None:
        if x.shape[1] != self.cfg.channels:
            raise ValueError(f"SCAN expects {self.cfg.channels} channels, got {x.shape[1]}")

    def branch_transforms(self, x: Tensor) -> tuple[Tensor, Tensor]:
        self._check(x)
        return self.branch1(x), self.branch2(x)

    def channel_select(self, u1: Tensor, u2: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns ``(V, a, b)`` with ``a``, ``b`` shaped ``N x C``."""
        if u1.shape != u2.shape:
            raise ValueError(f"branch shapes differ: {u1.shape} vs {u2.shape}")
        u = u1 + u2
        n, c = u.shape[:2]
        s = F.global_avg_pool(u).reshape(n, c, 1, 1)
        z = self.bn(self.fc(s)).relu()
        logits = stack([self.A(z), self.B(z)], axis=0)  # 2 x N x C x 1 x 1
        ab = F.softmax(logits, axis=0)
        a, b = ab[0], ab[1]
        v = a * u1 + b * u2
        return v, a.reshape(n, c), b.reshape(n, c)

    def spatial_attend(self, u: Tensor) -> Tensor:
        return u * self.spatial(u).sigmoid()

    def forward(self, x: Tensor, return_parts: bool = False):
        x, squeeze = _batched(x)
        u1, u2 = self.branch_transforms(x)
        v, a, b = self.channel_select(u1, u2)
        u_att = self.spatial_attend(u1 + u2)
        out = x + u_att + v
        if squeeze:
            out = out.reshape(out.shape[1:])
        if return_parts:
            return out, {"U~": u1, "U^": u2, "V": v, "a": a, "b": b, "U'": u_att}
        return out


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, *, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, rng=rng, dtype=dtype)
        self.fc2 = nn.Linear(hidden, dim, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, *, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.dim = dim
        self.ln1 = nn.LayerNorm(dim, dtype=dtype)
        self.msa = nn.MultiHeadSelfAttention(dim, heads, rng=rng, dtype=dtype)
        self.ln2 = nn.LayerNorm(dim, dtype=dtype)
        self.mlp = MLP(dim, mlp_ratio * dim, rng=rng, dtype=dtype)

    def forward_tokens(self, t: Tensor) -> Tensor:
        t = self.msa(self.ln1(t)) + t
        return self.mlp(self.ln2(t)) + t

    def forward(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        n, c, h, w = x.shape
        if c != self.dim:
            raise ValueError(f"transformer block expects {self.dim} channels, got {c}")
        t = x.reshape(n, c, h * w).transpose(0, 2, 1)
        out = self.forward_tokens(t).transpose(0, 2, 1).reshape(n, c, h, w)
        return out.reshape(out.shape[1:]) if squeeze else out


class TransScan(nn.Module):
    """One SCAN followed by one transformer encoder block."""

    def __init__(self, cfg: TransScanConfig, *, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.cfg = cfg
        self.scan = SCAN(cfg.scan, rng=rng, dtype=dtype)
        self.tr = TransformerBlock(cfg.dim, cfg.num_heads, cfg.mlp_ratio, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.tr(self.scan(x))


class TransScanStack(nn.ModuleList):
    def __init__(self, cfg: TransScanConfig, *, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__([TransScan(cfg, rng=rng, dtype=dtype) for _ in range(cfg.depth)])

    def forward(self, x: Tensor) -> Tensor:
        for blk in self:
            x = blk(x)
        return x


# functional spellings of the block operations


def branch_transforms(x: Tensor, scan: SCAN) -> tuple[Tensor, Tensor]:
    xb, squeeze = _batched(x)
    u1, u2 = scan.branch_transforms(xb)
    if squeeze:
        return u1.reshape(u1.shape[1:]), u2.reshape(u2.shape[1:])
    return u1, u2


def channel_select(u1: Tensor, u2: Tensor, scan: SCAN):
    b1, squeeze = _batched(u1)
    b2, _ = _batched(u2)
    v, a, b = scan.channel_select(b1, b2)
    if squeeze:
        return v.reshape(v.shape[1:]), a.reshape(-1), b.reshape(-1)
    return v, a, b


def spatial_attend(u: Tensor, scan: SCAN) -> Tensor:
    ub, squeeze = _batched(u)
    out = scan.spatial_attend(ub)
    return out.reshape(out.shape[1:]) if squeeze else out


def scan_forward(x: Tensor, scan: SCAN) -> Tensor:
    return scan(x)


def transformer_block(x: Tensor, block: TransformerBlock) -> Tensor:
    return block(x)


def transscan_forward(x: Tensor, block: TransScan) -> Tensor:
    return block(x)
