import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efcm.costs import conv_mac, conv_params, count_mac, linear_mac, linear_params
from efcm.models import ModelSpec, build_model
from efcm.profiler import (
    CSV_COLUMNS,
    FPSProtocol,
    check_supported,
    efficiency_report,
    gflops,
    measure_fps,
    read_report_csv,
)
from efcm.tensor import nn

TINY = ModelSpec("fpd", input_size=32, dim=32, depth=1, teacher_dim=16, groups=8, reduced_dim=8)


def test_conv_oracle():
    assert conv_mac(64, 64, 3, 56, 56) == 115_605_504
    assert conv_params(64, 64, 3) == 36_928


def test_linear_oracle():
    assert linear_mac(384, 1024) == 393_216
    assert linear_params(384, 1024, bias=False) == 393_216


@pytest.mark.parametrize("groups", [1, 2, 4, 8, 32])
def test_grouped_conv_divides_by_groups(groups):
    assert conv_mac(64, 64, 3, 14, 14, groups) * groups == conv_mac(64, 64, 3, 14, 14)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**13))
def test_gflops_convention(mac):
    assert gflops(mac) == 2 * mac / 1e9


def test_reference_macs():
    assert count_mac(ModelSpec("fpd")) == 2_272_698_880
    assert count_mac(ModelSpec("vfd")) == 3_278_946_304


def test_unsupported_module_is_rejected():
    class Odd(nn.Module):
        def forward(self, x):
            return x

    with pytest.raises(TypeError):
        check_supported(nn.Sequential(Odd()))


def test_protocol_validation():
    with pytest.raises(ValueError):
        FPSProtocol(timed=0)
    with pytest.raises(ValueError):
        FPSProtocol(aggregation="mean")


def test_measure_fps_counts_samples():
    res = measure_fps(build_model(TINY), (3, 32, 32), FPSProtocol(warmup=1, timed=3))
    assert len(res.samples) == 3
    assert res.fps == pytest.approx(1.0 / np.median(res.samples))


def test_report_roundtrip(tmp_path):
    specs = {"fpd": TINY, "vfd": TINY.with_(variant="vfd")}
    rows = efficiency_report(specs, FPSProtocol(warmup=0, timed=2), tmp_path, memory=True)
    back = read_report_csv(tmp_path / "efficiency.csv")
    assert list(back[0])[: len(CSV_COLUMNS)] == CSV_COLUMNS
    for r, b in zip(rows, back):
        assert b["model"] == r.model and b["params"] == r.params and b["mac"] == r.mac
        assert b["gflops"] == r.gflops and b["fps"] == r.fps
        assert b["mem_bytes"] == r.mem_bytes > 0
        assert b["protocol_json"]["timed"] == 2
    assert (tmp_path / "efficiency.json").exists()


def test_static_report_has_no_fps(tmp_path):
    rows = efficiency_report({"fpd": TINY}, out_dir=tmp_path, measure=False)
    assert rows[0].fps is None
    assert read_report_csv(tmp_path / "efficiency.csv")[0]["fps"] is None
