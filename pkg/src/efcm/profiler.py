"""Static cost report (params, MAC, GFLOPS) plus measured frames per second.

GFLOPS is reported as ``2 * MAC / 1e9`` (one multiply and one add per MAC).
FPS protocol: batch-1 forwards without autograd, ``warmup`` iterations
discarded, ``1 / median`` of ``timed`` wall-clock samples.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import costs
from .models import Bottleneck, FPDStudent, ModelSpec, RandomTeacher, ResNetTrunk, VFDStudent, build_model
from .scan import MLP, SCAN, TransformerBlock, TransScan, TransScanStack
from .tensor import Tensor, no_grad
from .tensor import nn

CSV_COLUMNS = ["model", "params", "mac", "gflops", "fps", "input_shape", "protocol_json"]

# every module type a model in this package can contain
SUPPORTED = (
    nn.Linear, nn.Conv2d, nn.BatchNorm, nn.LayerNorm, nn.ReLU, nn.GELU, nn.MaxPool2d, nn.MultiHeadSelfAttention,
    nn.Sequential, nn.ModuleList, SCAN, MLP, TransformerBlock, TransScan, TransScanStack,
    Bottleneck, ResNetTrunk, FPDStudent, VFDStudent, RandomTeacher,
)  # fmt: skip


def gflops(mac: int) -> float:
    return 2 * mac / 1e9


def check_supported(model: nn.Module) -> None:
    for name, mod in model.named_modules():
        if type(mod) not in SUPPORTED:
            raise TypeError(f"no cost rule for {type(mod).__name__} at {name or '<root>'}")


def plan_matches_model(spec: ModelSpec, model: nn.Module) -> dict:
    """Per-layer parameter counts of the closed-form plan vs the instantiated model.

    Returns ``{layer: (planned, actual)}`` for every mismatch (empty when they agree).
    """
    check_supported(model)
    actual: dict[str, int] = {}
    for name, p in model.named_parameters():
        layer = name.rsplit(".", 1)[0]
        actual[layer] = actual.get(layer, 0) + p.size
    planned = {r.name: r.params for r in costs.layer_plan(spec) if r.params}
    # attention blocks hold qkv/proj as child linears; the plan names them the same way
    out = {}
    for k in set(actual) | set(planned):
        if actual.get(k, 0) != planned.get(k, 0):
            out[k] = (planned.get(k, 0), actual.get(k, 0))
    return out


@dataclass(frozen=True)
class FPSProtocol:
    batch: int = 1
    warmup: int = 10
    timed: int = 100
    aggregation: str = "median"

    def __post_init__(self):
        if self.timed < 1:
            raise ValueError("timed iterations must be >= 1")
        if self.warmup < 0 or self.batch < 1:
            raise ValueError("warmup must be >= 0 and batch >= 1")
        if self.aggregation != "median":
            raise ValueError("only median aggregation is supported")


@dataclass
class FPSResult:
    fps: float
    median_s: float
    samples: list
    protocol: FPSProtocol
    input_shape: tuple

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


def measure_fps(model: nn.Module, input_shape, protocol: FPSProtocol | None = None, seed: int = 0) -> FPSResult:
    """``input_shape`` is ``C x H x W``; the batch dimension comes from the protocol."""
    protocol = protocol or FPSProtocol()
    shape = (protocol.batch,) + tuple(input_shape)
    dtype = next(iter(model.parameters())).dtype if model.parameters() else np.float32
    x = Tensor(np.random.default_rng(seed).standard_normal(shape).astype(dtype))
    model.eval()
    samples = []
    with no_grad():
        for i in range(protocol.warmup + protocol.timed):
            t0 = time.perf_counter()
            model(x)
            dt = time.perf_counter() - t0
            if i >= protocol.warmup:
                samples.append(dt)
    med = float(np.median(samples))
    return FPSResult(protocol.batch / med, med, samples, protocol, tuple(input_shape))


@dataclass
class ReportRow:
    model: str
    params: int
    mac: int
    gflops: float
    fps: float | None
    input_shape: tuple
    protocol: dict = field(default_factory=dict)
    mem_bytes: int | None = None

    def csv_row(self, memory: bool = False) -> list:
        row = [
            self.model,
            self.params,
            self.mac,
            repr(self.gflops),
            "" if self.fps is None else repr(self.fps),
            "x".join(str(s) for s in self.input_shape),
            json.dumps(self.protocol, sort_keys=True),
        ]
        return row + [self.mem_bytes] if memory else row


def efficiency_report(
    specs: dict,
    protocol: FPSProtocol | None = None,
    out_dir=None,
    measure: bool = True,
    memory: bool = False,
    seed: int = 0,
) -> list[ReportRow]:
    """One row per named :class:`ModelSpec`; writes ``efficiency.csv`` and ``efficiency.json`` if ``out_dir``."""
    protocol = protocol or FPSProtocol()
    rows = []
    for name, spec in specs.items():
        shape = (3, spec.input_size, spec.input_size)
        mac = costs.count_mac(spec)
        fps = None
        prot = asdict(protocol)
        if measure:
            res = measure_fps(build_model(spec, seed=seed), shape, protocol, seed)
            fps = res.fps
            prot = {**prot, "median_s": res.median_s, "samples_s": res.samples}
        rows.append(
            ReportRow(name, costs.count_params(spec), mac, gflops(mac), fps, shape, prot, costs.count_bytes(spec) if memory else None)
        )
    if out_dir is not None:
        write_report(rows, out_dir, memory)
    return rows


def write_report(rows: list[ReportRow], out_dir, memory: bool = False) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "efficiency.csv", out / "efficiency.json"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS + (["mem_bytes"] if memory else []))
        for r in rows:
            w.writerow(r.csv_row(memory))
    payload = {"version": 1, "gflops_convention": "2*mac/1e9", "rows": [_row_dict(r, memory) for r in rows]}
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def _row_dict(r: ReportRow, memory: bool) -> dict:
    d = asdict(r)
    d["input_shape"] = list(r.input_shape)
    if not memory:
        d.pop("mem_bytes")
    return d


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["params"] = int(r["params"])
        r["mac"] = int(r["mac"])
        r["gflops"] = float(r["gflops"])
        r["fps"] = float(r["fps"]) if r["fps"] else None
        r["protocol_json"] = json.loads(r["protocol_json"])
        if "mem_bytes" in r:
            r["mem_bytes"] = int(r["mem_bytes"])
    return rows
