"""Closed-form per-layer parameter and multiply-accumulate counts.

The plan is derived from a :class:`ModelSpec` alone, without building the
network. Conventions:

* conv: ``C_out * (C_in / groups) * k^2 * H_out * W_out`` MAC
* linear: ``in * out`` MAC per token
* attention: ``2 * N^2 * C`` MAC for scores and value aggregation
  (its q/k/v and output projections are separate linear rows)
* norms, activations, pooling, softmax and elementwise ops: 0 MAC

``bytes`` is a rough memory-traffic estimate: float32 input + output
activations + weights per layer.
"""

from __future__ import annotations

from dataclasses import dataclass

from .models import RESNET50_STAGES, ModelSpec

BYTES_PER_ELEM = 4


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    params: int
    mac: int
    in_elems: int
    out_elems: int

    @property
    def bytes(self) -> int:
        return BYTES_PER_ELEM * (self.in_elems + self.out_elems + self.params)


class _Planner:
    def __init__(self):
        self.rows: list[LayerCost] = []

    def conv(self, name, cin, cout, k, h, w, stride=1, padding=0, dilation=1, groups=1, bias=True):
        ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
        wo = (w + 2 * padding - dilation * (k - 1) - 1) // stride + 1
        params = cout * (cin // groups) * k * k + (cout if bias else 0)
        mac = cout * (cin // groups) * k * k * ho * wo
        self.rows.append(LayerCost(name, "conv", params, mac, cin * h * w, cout * ho * wo))
        return ho, wo

    def bn(self, name, c, h=1, w=1):
        self.rows.append(LayerCost(name, "batch_norm", 2 * c, 0, c * h * w, c * h * w))

    def ln(self, name, c, tokens):
        self.rows.append(LayerCost(name, "layer_norm", 2 * c, 0, c * tokens, c * tokens))

    def linear(self, name, fin, fout, tokens=1, bias=True):
        params = fin * fout + (fout if bias else 0)
        self.rows.append(LayerCost(name, "linear", params, fin * fout * tokens, fin * tokens, fout * tokens))

    def attention(self, name, tokens, c):
        self.rows.append(LayerCost(name, "attention", 0, 2 * tokens * tokens * c, 3 * tokens * c, tokens * c))

    def pool(self, name, c, h, w, ho, wo):
        self.rows.append(LayerCost(name, "pool", 0, 0, c * h * w, c * ho * wo))


def _trunk(p: _Planner, prefix: str, stages: int, size: int) -> tuple[int, int, int]:
    h = w = size
    h, w = p.conv(f"{prefix}.conv1", 3, 64, 7, h, w, stride=2, padding=3, bias=False)
    p.bn(f"{prefix}.bn1", 64, h, w)
    ho, wo = (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1
    p.pool(f"{prefix}.maxpool", 64, h, w, ho, wo)
    h, w = ho, wo
    cin = 64
    for si, (blocks, width, stride) in enumerate(RESNET50_STAGES[:stages]):
        for j in range(blocks):
            s = stride if j == 0 else 1
            name = f"{prefix}.layer{si + 1}.{j}"
            cout = 4 * width
            p.conv(f"{name}.conv1", cin, width, 1, h, w, bias=False)
            p.bn(f"{name}.bn1", width, h, w)
            h2, w2 = p.conv(f"{name}.conv2", width, width, 3, h, w, stride=s, padding=1, bias=False)
            p.bn(f"{name}.bn2", width, h2, w2)
            p.conv(f"{name}.conv3", width, cout, 1, h2, w2, bias=False)
            p.bn(f"{name}.bn3", cout, h2, w2)
            if s != 1 or cin != cout:
                p.conv(f"{name}.downsample.0", cin, cout, 1, h, w, stride=s, bias=False)
                p.bn(f"{name}.downsample.1", cout, h2, w2)
            cin, h, w = cout, h2, w2
    return cin, h, w


def _transscan(p: _Planner, prefix: str, spec: ModelSpec, h: int, w: int) -> None:
    cfg = spec.transscan
    c, g, d = cfg.dim, cfg.groups, cfg.reduced_dim
    n = h * w
    hidden = cfg.mlp_ratio * c
    for i in range(cfg.depth):
        b = f"{prefix}.{i}"
        p.conv(f"{b}.scan.branch1", c, c, 3, h, w, padding=1, dilation=1, groups=g)
        p.conv(f"{b}.scan.branch2", c, c, 3, h, w, padding=2, dilation=2, groups=g)
        p.conv(f"{b}.scan.fc", c, d, 1, 1, 1, bias=False)
        p.bn(f"{b}.scan.bn", d)
        p.conv(f"{b}.scan.A", d, c, 1, 1, 1, bias=False)
        p.conv(f"{b}.scan.B", d, c, 1, 1, 1, bias=False)
        p.conv(f"{b}.scan.spatial", c, 1, 1, h, w)
        p.ln(f"{b}.tr.ln1", c, n)
        p.linear(f"{b}.tr.msa.qkv", c, 3 * c, n, bias=False)
        p.attention(f"{b}.tr.msa.attn", n, c)
        p.linear(f"{b}.tr.msa.proj", c, c, n)
        p.ln(f"{b}.tr.ln2", c, n)
        p.linear(f"{b}.tr.mlp.fc1", c, hidden, n)
        p.linear(f"{b}.tr.mlp.fc2", hidden, c, n)


def layer_plan(spec: ModelSpec) -> list[LayerCost]:
    p = _Planner()
    size = spec.input_size
    if spec.variant == "fpd":
        cin, h, w = _trunk(p, "extractor", 1, size)
        h, w = p.conv("proj", cin, spec.dim, 4, h, w, stride=4)
        _transscan(p, "blocks", spec, h, w)
        p.linear("head", spec.dim, spec.teacher_dim)
    elif spec.variant == "vfd":
        cin, h, w = _trunk(p, "extractor", 3, size)
        p.linear("head", cin, spec.teacher_dim)
    else:
        h = w = size
        chans = (3,) + tuple(spec.teacher_widths)
        for i in range(len(chans) - 1):
            h, w = p.conv(f"convs.{i}", chans[i], chans[i + 1], 3, h, w, stride=2, padding=1)
        p.linear("head", chans[-1], spec.teacher_dim)
    return p.rows


def count_params(spec: ModelSpec, breakdown: bool = False):
    """Exact parameter count (frozen parameters included)."""
    rows = layer_plan(spec)
    total = sum(r.params for r in rows)
    if breakdown:
        return total, {r.name: r.params for r in rows if r.params}
    return total


def count_mac(spec: ModelSpec, input_size: int | None = None) -> int:
    if input_size is not None and input_size != spec.input_size:
        spec = spec.with_(input_size=input_size)
    return sum(r.mac for r in layer_plan(spec))


def count_bytes(spec: ModelSpec) -> int:
    return sum(r.bytes for r in layer_plan(spec))


def conv_mac(cin: int, cout: int, k: int, h_out: int, w_out: int, groups: int = 1) -> int:
    return cout * (cin // groups) * k * k * h_out * w_out


def linear_mac(fin: int, fout: int, tokens: int = 1) -> int:
    return fin * fout * tokens


def conv_params(cin: int, cout: int, k: int, groups: int = 1, bias: bool = True) -> int:
    return cout * (cin // groups) * k * k + (cout if bias else 0)


def linear_params(fin: int, fout: int, bias: bool = True) -> int:
    return fin * fout + (fout if bias else 0)
