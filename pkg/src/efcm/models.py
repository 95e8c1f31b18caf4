"""Student and teacher networks.

Both students start from a ResNet50-shaped trunk (stem + bottleneck stages)
with random weights. FPD keeps only the stem and ``layer1`` (256 x H/4 x W/4),
frozen, then projects with a k4/s4 conv to ``dim x H/16 x W/16``, runs a
TransScan stack, mean-pools the tokens and maps to the teacher width. VFD
keeps the trunk through ``layer3`` (1024 x H/16 x W/16), all trainable,
mean-pools and maps 1024 to the teacher width.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .io import FeatureStore
from .scan import TransScanConfig, TransScanStack
from .tensor import Tensor, no_grad
from .tensor import functional as F
from .tensor import nn
from .tensor.nn import DEFAULT_DTYPE

VARIANTS = ("fpd", "vfd", "teacher-frozen-random")

# (blocks, width, stride) per ResNet50 stage
RESNET50_STAGES = ((3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2))


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "fpd"
    input_size: int = 224
    dim: int = 384
    depth: int = 3
    heads: int | None = None
    mlp_ratio: int = 4
    groups: int = 32
    reduced_dim: int = 32
    teacher_dim: int = 1024
    extractor_frozen: bool | None = None  # None -> True for fpd, False for vfd
    teacher_widths: tuple = (32, 64, 128)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.input_size % 16:
            raise ValueError(f"input_size must be a multiple of 16, got {self.input_size}")
        if self.teacher_dim < 1:
            raise ValueError("teacher_dim must be >= 1")
        if self.variant == "fpd":
            self.transscan  # validates dim/heads/groups

    @property
    def transscan(self) -> TransScanConfig:
        return TransScanConfig(self.dim, self.depth, self.heads, self.mlp_ratio, self.groups, self.reduced_dim)

    @property
    def frozen_extractor(self) -> bool:
        if self.extractor_frozen is not None:
            return self.extractor_frozen
        return self.variant == "fpd"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["teacher_widths"] = list(self.teacher_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if "teacher_widths" in d:
            d["teacher_widths"] = tuple(d["teacher_widths"])
        return cls(**d)

    def with_(self, **kw) -> "ModelSpec":
        return replace(self, **kw)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch: int, width: int, stride: int, *, rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = nn.BatchNorm(width, dtype=dtype)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = nn.BatchNorm(width, dtype=dtype)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False, rng=rng, dtype=dtype)
        self.bn3 = nn.BatchNorm(out_ch, dtype=dtype)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False, rng=rng, dtype=dtype),
                nn.BatchNorm(out_ch, dtype=dtype),
            )

    def forward(self, x: Tensor) -> Tensor:
        out = self.bn1(self.conv1(x)).relu()
        out = self.bn2(self.conv2(out)).relu()
        out = self.bn3(self.conv3(out))
        identity = self.downsample(x) if self.downsample is not None else x
        return (out + identity).relu()


class ResNetTrunk(nn.Module):
    """ResNet50 stem plus the first ``num_stages`` bottleneck stages."""

    def __init__(self, num_stages: int, *, rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False, rng=rng, dtype=dtype)
        self.bn1 = nn.BatchNorm(64, dtype=dtype)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        in_ch = 64
        for i, (blocks, width, stride) in enumerate(RESNET50_STAGES[:num_stages]):
            mods = []
            for j in range(blocks):
                mods.append(Bottleneck(in_ch, width, stride if j == 0 else 1, rng=rng, dtype=dtype))
                in_ch = width * Bottleneck.expansion
            setattr(self, f"layer{i + 1}", nn.Sequential(*mods))
        self.num_stages = num_stages
        self.out_channels = in_ch

    def forward(self, x: Tensor) -> Tensor:
        x = self.maxpool(self.bn1(self.conv1(x)).relu())
        for i in range(self.num_stages):
            x = getattr(self, f"layer{i + 1}")(x)
        return x


def _check_input(x: Tensor, size: int) -> None:
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
        raise ValueError(f"expected N x 3 x {size} x {size} input, got {x.shape}")


class FPDStudent(nn.Module):
    def __init__(self, spec: ModelSpec, *, rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.spec = spec
        cfg = spec.transscan
        self.extractor = ResNetTrunk(1, rng=rng, dtype=dtype)
        self.proj = nn.Conv2d(256, cfg.dim, 4, stride=4, rng=rng, dtype=dtype)
        self.blocks = TransScanStack(cfg, rng=rng, dtype=dtype)
        self.head = nn.Linear(cfg.dim, spec.teacher_dim, rng=rng, dtype=dtype)
        if spec.frozen_extractor:
            self.extractor.freeze()

    def extract(self, x: Tensor) -> Tensor:
        _check_input(x, self.spec.input_size)
        if self.extractor.frozen:
            with no_grad():
                return self.extractor(x)
        return self.extractor(x)

    def project(self, feats: Tensor, return_maps: bool = False):
        """Everything after the extractor: ``256 x H/4 x W/4 -> D_t``."""
        x = self.proj(feats)
        maps = [feats, x]
        x = self.blocks(x)
        out = self.head(x.mean(axis=(2, 3)))
        return (out, maps) if return_maps else out

    def forward(self, x: Tensor, return_maps: bool = False):
        return self.project(self.extract(x), return_maps)


class VFDStudent(nn.Module):
    def __init__(self, spec: ModelSpec, *, rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.spec = spec
        self.extractor = ResNetTrunk(3, rng=rng, dtype=dtype)
        self.head = nn.Linear(self.extractor.out_channels, spec.teacher_dim, rng=rng, dtype=dtype)
        if spec.frozen_extractor:
            self.extractor.freeze()

    def forward(self, x: Tensor, return_maps: bool = False):
        _check_input(x, self.spec.input_size)
        feats = self.extractor(x)
        out = self.head(feats.mean(axis=(2, 3)))
        return (out, [feats]) if return_maps else out


class RandomTeacher(nn.Module):
    """Fixed-seed convnet stand-in for a pretrained foundation model.

    Three stride-2 3x3 conv + ReLU stages, global average pooling, a linear
    map to ``teacher_dim`` and a final affine-free layer norm, so the
    features have the unit per-sample scale of a transformer encoder output.
    Always frozen.
    """

    def __init__(self, spec: ModelSpec, *, rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.spec = spec
        chans = (3,) + tuple(spec.teacher_widths)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1, rng=rng, dtype=dtype)
            for i in range(len(chans) - 1)
        )
        self.head = nn.Linear(chans[-1], spec.teacher_dim, rng=rng, dtype=dtype)
        self.freeze()

    def forward(self, x: Tensor) -> Tensor:
        with no_grad():
            for conv in self.convs:
                x = conv(x).relu()
            feats = self.head(x.mean(axis=(2, 3)))
            return F.layer_norm(feats, None, None)


class FileTeacher:
    """Teacher whose features are looked up by sample id in a feature store."""

    def __init__(self, store: FeatureStore, key: str = "features"):
        self.store = store
        self.key = key

    def __call__(self, sample_ids) -> Tensor:
        return Tensor(np.stack([self.store.get(sid, self.key) for sid in sample_ids]))


def build_model(spec: ModelSpec, seed: int = 0, dtype=DEFAULT_DTYPE) -> nn.Module:
    rng = np.random.default_rng(seed)
    if spec.variant == "fpd":
        return FPDStudent(spec, rng=rng, dtype=dtype)
    if spec.variant == "vfd":
        return VFDStudent(spec, rng=rng, dtype=dtype)
    return RandomTeacher(spec, rng=rng, dtype=dtype)


def fpd_student_forward(x: Tensor, model: FPDStudent) -> Tensor:
    return model(x)


def vfd_student_forward(x: Tensor, model: VFDStudent) -> Tensor:
    return model(x)


def teacher_forward(x, teacher) -> Tensor:
    """``x`` is an image batch for a random teacher or sample ids for a file-backed one."""
    return teacher(x)

