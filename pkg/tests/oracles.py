"""Independent helpers shared by the module tests and the acceptance suite."""

import itertools

import numpy as np

from efcm.mil import AttentionMILHead
from efcm.scan import SCAN, ScanConfig, TransformerBlock, TransScanConfig, TransScanStack
from efcm.tensor import Tensor, grad_check, projected


def max_grad_error(fn, module, x: np.ndarray, seed: int, max_coords: int | None = None) -> float:
    """Worst relative error of d(sum(R * fn(x)))/d{x, parameters}.

    The input is always checked exhaustively; ``max_coords`` caps the sampled
    coordinates per parameter tensor.
    """
    xt = Tensor(np.asarray(x, dtype=np.float64))
    f = projected(lambda xx, *ps: fn(xx), seed)
    err = grad_check(f, [xt])
    params = module.parameters()
    if params:
        err = max(err, grad_check(f, [xt] + params, max_coords=max_coords, seed=seed))
    return err


def small_scan(seed: int, channels=8, groups=2, reduced=4):
    return SCAN(ScanConfig(channels, groups, reduced), rng=np.random.default_rng(seed)).double()


def small_block(seed: int, dim=8, heads=2):
    return TransformerBlock(dim, heads, 4, rng=np.random.default_rng(seed)).double()


def small_stack(seed: int, dim=8, depth=2):
    cfg = TransScanConfig(dim=dim, depth=depth, heads=2, groups=2, reduced_dim=4)
    return TransScanStack(cfg, rng=np.random.default_rng(seed)).double()


def small_head(seed: int, dim=6, hidden=5):
    return AttentionMILHead(dim, hidden, 2, rng=np.random.default_rng(seed)).double()


def identity_scan(channels: int, groups: int, reduced: int, seed: int = 0) -> SCAN:
    """Identity-kernel branches, zero A/B logits (a = b = 1/2) and a zero spatial map."""
    scan = small_scan(seed, channels, groups, reduced)
    cg = channels // groups
    for conv in (scan.branch1, scan.branch2):
        w = np.zeros_like(conv.weight.data)
        for oc in range(channels):
            w[oc, oc % cg, 1, 1] = 1.0
        conv.weight.data = w
        conv.bias.data = np.zeros_like(conv.bias.data)
    scan.A.weight.data[:] = 0.0
    scan.B.weight.data[:] = 0.0
    scan.spatial.weight.data[:] = 0.0
    scan.spatial.bias.data[:] = 0.0
    return scan


def identity_stack(dim: int, depth: int, seed: int = 0) -> TransScanStack:
    stack = small_stack(seed, dim, depth)
    for blk in stack:
        ref = identity_scan(dim, blk.scan.cfg.groups, blk.scan.cfg.reduced_dim, seed)
        blk.scan.load_state_dict(ref.state_dict())
        for lin in (blk.tr.msa.proj, blk.tr.mlp.fc2):
            lin.weight.data[:] = 0.0
            lin.bias.data[:] = 0.0
    return stack


def pair_count_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))
