"""Primitive layers with hand-written backward passes.

Image-like tensors are ``N x C x H x W``; a 3-d ``C x H x W`` input is
treated as a batch of one and returned without the batch axis.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .core import Tensor


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _taps(k: int, dilation: int, stride: int, h_out: int, w_out: int):
    for i in range(k):
        for j in range(k):
            hi, wj = i * dilation, j * dilation
            yield i, j, slice(hi, hi + stride * (h_out - 1) + 1, stride), slice(wj, wj + stride * (w_out - 1) + 1, stride)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """Cross-correlation with stride, zero padding, dilation and channel groups."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4:
        raise ValueError(f"conv2d expects C x H x W or N x C x H x W input, got {x.shape}")
    n, c, h, w = x.shape
    out_ch, cin_g, k, k2 = weight.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if groups < 1 or c % groups or out_ch % groups:
        raise ValueError(f"groups={groups} must divide in_ch={c} and out_ch={out_ch}")
    if cin_g * groups != c:
        raise ValueError(f"input has {c} channels, kernel expects {cin_g * groups}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("stride and dilation must be >= 1, padding >= 0")
    h_out = conv_output_size(h, k, stride, padding, dilation)
    w_out = conv_output_size(w, k, stride, padding, dilation)
    if h_out < 1 or w_out < 1:
        raise ValueError(f"input {h}x{w} too small for kernel {k} (dilation {dilation}, padding {padding})")

    og = out_ch // groups
    kg = cin_g * k * k
    m = n * h_out * w_out
    xd = x.data
    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xd.transpose(1, 0, 2, 3).reshape(groups, kg, m)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        xpt = xp.transpose(1, 0, 2, 3)
        buf = np.empty((c, k, k, n, h_out, w_out), dtype=xd.dtype)
        for i, j, hs, ws in _taps(k, dilation, stride, h_out, w_out):
            buf[:, i, j] = xpt[:, :, hs, ws]
        cols = buf.reshape(groups, kg, m)
    wmat = weight.data.reshape(groups, og, kg)
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite outputs raise below
        out = np.matmul(wmat, cols).reshape(out_ch, n, h_out, w_out).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(groups, og, m)
        gw = gx = gb = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).reshape(weight.shape)
        if x.requires_grad:
            dcols = np.matmul(wmat.transpose(0, 2, 1), g2)
            if pointwise:
                gx = dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
            else:
                dcols = dcols.reshape(c, k, k, n, h_out, w_out)
                dxpt = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                for i, j, hs, ws in _taps(k, dilation, stride, h_out, w_out):
                    dxpt[:, :, hs, ws] += dcols[:, i, j]
                gx = dxpt[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    y = Tensor._make(out, parents, bw, "conv2d")
    return y.reshape(y.shape[1:]) if squeeze else y


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    n, c, h, w = x.shape
    h_out = conv_output_size(h, kernel, stride, padding)
    w_out = conv_output_size(w, kernel, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    taps = list(_taps(kernel, 1, stride, h_out, w_out))
    windows = np.stack([xp[:, :, hs, ws] for _, _, hs, ws in taps])
    idx = windows.argmax(axis=0)
    out = np.take_along_axis(windows, idx[None], axis=0)[0]

    def bw(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for t, (_, _, hs, ws) in enumerate(taps):
            dxp[:, :, hs, ws] += g * (idx == t)
        return (dxp[:, :, padding : padding + h, padding : padding + w],)

    return Tensor._make(out, (x,), bw, "max_pool2d")


def global_avg_pool(u: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: ``C x H x W -> C``."""
    if u.ndim < 3:
        raise ValueError(f"expected spatial input, got shape {u.shape}")
    if u.shape[-1] < 1 or u.shape[-2] < 1:
        raise ValueError("global_avg_pool on an empty spatial extent")
    return u.mean(axis=(-2, -1))


def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    a = x.data
    cdf = 0.5 * (1.0 + erf(a * _INV_SQRT2))

    def bw(g):
        return (g * (cdf + a * _INV_SQRT2PI * np.exp(-0.5 * a * a)),)

    return Tensor._make(a * cdf, (x,), bw, "gelu")


def pointwise(kind: str, x: Tensor) -> Tensor:
    fns = {"relu": relu, "sigmoid": sigmoid, "gelu": gelu}
    if kind not in fns:
        raise ValueError(f"unknown pointwise op {kind!r}")
    return fns[kind](x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(y, (x,), bw, "log_softmax")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is ``out x in``."""
    lead = x.shape[:-1]
    fan_in = x.shape[-1]
    if weight.shape[1] != fan_in:
        raise ValueError(f"linear expects last dim {weight.shape[1]}, got {fan_in}")
    x2 = x.data.reshape(-1, fan_in)
    wd = weight.data
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[0],))

    def bw(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, bw, "linear")


def batch_norm(
    x: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    weight: Tensor | None,
    bias: Tensor | None,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of ``N x C [x H x W]`` input.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, like the usual convention).
    """
    if x.ndim not in (2, 4):
        raise ValueError(f"batch_norm expects N x C or N x C x H x W, got {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    a = x.data
    count = a.size // a.shape[1]
    if training:
        mean = a.mean(axis=axes)
        var = a.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * count / max(count - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    denom = var + eps
    if np.any(denom <= 0):
        raise ValueError("batch_norm variance + eps must be positive")
    inv_std = (1.0 / np.sqrt(denom)).astype(a.dtype)
    xhat = (a - mean.reshape(bshape).astype(a.dtype)) * inv_std.reshape(bshape)
    gamma = weight.data.reshape(bshape) if weight is not None else 1.0
    out = xhat * gamma
    if bias is not None:
        out = out + bias.data.reshape(bshape)

    def bw(g):
        gg = None
        gbeta = None
        if weight is not None and weight.requires_grad:
            gg = (g * xhat).sum(axis=axes)
        if bias is not None and bias.requires_grad:
            gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma
            if training:
                gx = (
                    inv_std.reshape(bshape)
                    / count
                    * (
                        count * gxhat
                        - gxhat.sum(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                    )
                )
            else:
                gx = gxhat * inv_std.reshape(bshape)
        grads = [gx]
        if weight is not None:
            grads.append(gg)
        if bias is not None:
            grads.append(gbeta)
        return tuple(grads)

    parents = [x]
    if weight is not None:
        parents.append(weight)
    if bias is not None:
        parents.append(bias)
    return Tensor._make(out, parents, bw, "batch_norm")


def layer_norm(x: Tensor, weight: Tensor | None, bias: Tensor | None, eps: float = 1e-5) -> Tensor:
    a = x.data
    d = a.shape[-1]
    mean = a.mean(axis=-1, keepdims=True)
    var = a.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (a - mean) * inv_std
    gamma = weight.data if weight is not None else 1.0
    out = xhat * gamma
    if bias is not None:
        out = out + bias.data

    def bw(g):
        lead = tuple(range(a.ndim - 1))
        grads = []
        if x.requires_grad:
            gxhat = g * gamma
            grads.append(
                inv_std / d * (d * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
            )
        else:
            grads.append(None)
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead) if weight.requires_grad else None)
        if bias is not None:
            grads.append(g.sum(axis=lead) if bias.requires_grad else None)
        return tuple(grads)

    parents = [x] + [t for t in (weight, bias) if t is not None]
    return Tensor._make(out, parents, bw, "layer_norm")


def multi_head_self_attention(
    tokens: Tensor,
    heads: int,
    qkv_weight: Tensor,
    qkv_bias: Tensor | None,
    proj_weight: Tensor,
    proj_bias: Tensor | None,
    return_attention: bool = False,
):
    """Scaled dot-product self-attention over ``[B x] N x C`` tokens.

    No positional information is added, so the map is permutation
    equivariant over tokens.
    """
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens.reshape((1,) + tokens.shape)
    b, n, c = tokens.shape
    if heads < 1 or c % heads:
        raise ValueError(f"channels {c} not divisible by heads {heads}")
    hd = c // heads
    qkv = linear(tokens, qkv_weight, qkv_bias)  # B x N x 3C
    qkv = qkv.reshape(b, n, 3, heads, hd).transpose(2, 0, 3, 1, 4)  # 3 x B x h x N x hd
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd))
    attn = softmax(scores, axis=-1)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, c)
    out = linear(ctx, proj_weight, proj_bias)
    if squeeze:
        out = out.reshape(n, c)
        attn = attn.reshape(attn.shape[1:])
    return (out, attn) if return_attention else out


def cross_entropy(logits: Tensor, target: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy against (optionally smoothed) one-hot targets.

    With smoothing ``eps`` the true class gets ``1 - eps + eps / K`` and every
    other class ``eps / K``.
    """
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    k = logits.shape[-1]
    dist = smoothed_targets(target, k, label_smoothing).astype(logits.dtype)
    logp = log_softmax(logits, axis=-1)
    return -(logp * Tensor(dist)).sum() * (1.0 / len(target))


def smoothed_targets(target: np.ndarray, num_classes: int, label_smoothing: float = 0.0) -> np.ndarray:
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must be in [0, 1)")
    dist = np.full((len(target), num_classes), label_smoothing / num_classes)
    dist[np.arange(len(target)), target] += 1.0 - label_smoothing
    return dist


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    diff = a - b
    return (diff * diff).mean()


__all__ = [
    "batch_norm",
    "conv2d",
    "conv_output_size",
    "cross_entropy",
    "gelu",
    "global_avg_pool",
    "layer_norm",
    "linear",
    "log_softmax",
    "max_pool2d",
    "mse_loss",
    "multi_head_self_attention",
    "pointwise",
    "relu",
    "sigmoid",
    "smoothed_targets",
    "softmax",
]
