import numpy as np
import pytest

from efcm.tensor import Tensor


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def t64(a, requires_grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)


# acceptance results, printed once at the end of the session
ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """``criterion(name, ok, detail)`` records one acceptance line and asserts ``ok``."""

    def record(name: str, ok: bool, detail: str = "") -> None:
        ok = bool(ok)
        ACCEPTANCE.append((name, ok, detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
