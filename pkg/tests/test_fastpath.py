"""The compiled loops must reproduce the reference loops bit for bit."""

import pytest

from aoi_bench import ArrivalSpec, Deterministic, Exponential, ScenarioConfig, run
from aoi_bench.fastpath import enabled as fastpath_enabled
from aoi_bench.engine import AGE, ASI
from aoi_bench.metrics.penalty import P_AVG, P_MAX, P_MS
from aoi_bench.model import DISCRETE, DELAY_NONE, DELAY_ZERO_OR_FOUR
from aoi_bench.presets import FIG5_SERVICE
from aoi_bench.stochastic import RandomStreams

pytestmark = pytest.mark.skipif(not fastpath_enabled(), reason="numba fast path unavailable")

METRICS = ((AGE, P_AVG), (AGE, P_MAX), (ASI, P_AVG), (AGE, P_MS), (ASI, P_MAX))
CONT_POLICIES = ["p-maf-lgfs", "np-masif-lgfs", "np-maf-lgfs", "np-maf-fcfs", "rand-lgfs", "rand-fcfs",
                 "rand-lgfs-shared", "maf-lgfs-idle1", "masif-fcfs", "p-maf-fcfs"]
CONT_CASES = [(3, 1, Exponential(1.0), 0.5, 0.0), (3, 2, Exponential(1.0), 1.0, 0.3),
              (5, 3, FIG5_SERVICE, 0.3, 0.0), (4, 2, Deterministic(0.7), 0.6, 0.2), (2, 3, Exponential(2.0), 2.0, 0.5)]


def _both(monkeypatch, cfg, policy, **kw):
    fast = run(cfg, policy, RandomStreams(cfg.seed), **kw)
    monkeypatch.setenv("AOI_BENCH_FASTPATH", "0")
    ref = run(cfg, policy, RandomStreams(cfg.seed), **kw)
    monkeypatch.delenv("AOI_BENCH_FASTPATH")
    return fast, ref


@pytest.mark.parametrize("policy", CONT_POLICIES)
@pytest.mark.parametrize("case", range(len(CONT_CASES)))
def test_continuous_fast_path_bit_exact(monkeypatch, policy, case):
    n, m, dist, lam, q = CONT_CASES[case]
    for seed in (1, 2):
        cfg = ScenarioConfig(n, m, dist, ArrivalSpec(lam), q, horizon=300.0, seed=seed,
                             initial_age=tuple(float(i) for i in range(n)))
        fast, ref = _both(monkeypatch, cfg, policy, metrics=METRICS, record_trace=False)
        assert fast.penalties == ref.penalties
        assert fast.draw_counts == ref.draw_counts
        assert fast.n_events == ref.n_events


DISC_POLICIES = ["dt-maf-lgfs", "np-maf-fcfs", "rand-lgfs", "rand-fcfs", "masif-lgfs", "maf-lgfs-shared",
                 "rand-lgfs-shared", "maf-lgfs-idle1"]
DISC_CASES = [(3, 2, 0.6, 0.0, DELAY_ZERO_OR_FOUR), (3, 2, 0.6, 0.3, DELAY_ZERO_OR_FOUR), (4, 3, 0.9, 0.5, DELAY_NONE),
              (2, 1, 0.3, 0.2, DELAY_ZERO_OR_FOUR), (5, 2, 1.0, 0.0, DELAY_NONE)]


@pytest.mark.parametrize("policy", DISC_POLICIES)
@pytest.mark.parametrize("case", range(len(DISC_CASES)))
def test_discrete_fast_path_bit_exact(monkeypatch, policy, case):
    n, m, lam, q, delay = DISC_CASES[case]
    for seed in (1, 2):
        cfg = ScenarioConfig(n, m, Deterministic(1.0), ArrivalSpec(lam, delay), q, DISCRETE, 1.0, 500.0, seed, policy,
                             tuple(float(i) for i in range(n)))
        fast, ref = _both(monkeypatch, cfg, policy, metrics=())
        assert fast.trace == ref.trace
        assert fast.trace.events == ref.trace.events
        assert fast.coupling_log == ref.coupling_log
        assert fast.draw_counts == ref.draw_counts


def test_disable_switch(monkeypatch):
    monkeypatch.setenv("AOI_BENCH_FASTPATH", "0")
    assert not fastpath_enabled()
