"""Slide/sample-level ACC and rank-based AUC."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


def binary_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when only one class is present")
    ranks = rankdata(s)  # average ranks: ties contribute one half
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pairwise_auc(scores, labels) -> float:
    """Exhaustive pair-counting AUC (quadratic; for checking)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if not len(pos) or not len(neg):
        raise ValueError("AUC is undefined when only one class is present")
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))


def auc(scores, labels) -> float:
    """Binary AUC for 1-d scores or ``N x 2`` scores; macro one-vs-rest for more classes."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if s.ndim == 1:
        return binary_auc(s, y)
    if s.shape[1] == 2:
        return binary_auc(s[:, 1], y)
    present = np.unique(y)
    if len(present) < 2:
        raise ValueError("AUC is undefined when only one class is present")
    return float(np.mean([binary_auc(s[:, c], y == c) for c in present]))


@dataclass
class MetricsRecord:
    split: str
    acc: float
    auc: float
    n: int
    class_counts: dict = field(default_factory=dict)
    epoch: int | None = None
    checkpoint: str | None = None

    def __post_init__(self):
        for name in ("acc", "auc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(scores, labels, split: str = "test", epoch=None, checkpoint=None) -> MetricsRecord:
    """``scores`` are per-sample class scores ``N x K`` (or positive-class scores ``N``)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if len(s) != len(y):
        raise ValueError(f"{len(s)} scores for {len(y)} labels")
    if not len(y):
        raise ValueError("no samples")
    pred = (s >= 0.5).astype(np.int64) if s.ndim == 1 else s.argmax(axis=1)
    acc = float((pred == y).mean())
    counts = {str(int(c)): int((y == c).sum()) for c in np.unique(y)}
    return MetricsRecord(split, acc, auc(s, y), len(y), counts, epoch, checkpoint)
