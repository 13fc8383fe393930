import pytest

from aoi_bench.model import ArrivalSpec, Deterministic, Exponential, ScenarioConfig, DISCRETE


@pytest.fixture
def reference_loop(monkeypatch):
    """Force the pure-Python event loops (no compiled fast path)."""
    monkeypatch.setenv("AOI_BENCH_FASTPATH", "0")


@pytest.fixture
def cont_cfg():
    return ScenarioConfig(3, 2, Exponential(1.0), ArrivalSpec(1.0), 0.3, horizon=200.0, seed=5,
                          initial_age=(0.0, 1.0, 2.0))


@pytest.fixture
def disc_cfg():
    return ScenarioConfig(3, 2, Deterministic(1.0), ArrivalSpec(0.6), 0.3, DISCRETE, 1.0, 300.0, 5,
                          "dt-maf-lgfs", (0.0, 3.0, 1.0))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
