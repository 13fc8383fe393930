import math

import pytest

from aoi_bench import (
    ArrivalSpec,
    ConfigError,
    Deterministic,
    Exponential,
    ScenarioConfig,
    SimulationDiverged,
    replicate,
    run,
    run_coupled,
)
from aoi_bench.engine import AGE, ASI, metric_key
from aoi_bench.metrics.checks import replay, scan_epochs_match
from aoi_bench.metrics.penalty import P_AVG, P_MAX
from aoi_bench.model import (
    ARRIVAL,
    DELIVERY_ERROR,
    DELIVERY_SUCCESS,
    DISCRETE,
    PREEMPTION,
    SERVICE_START,
    Event,
)
from aoi_bench.stochastic import RandomStreams


def explicit(*pairs):
    return ArrivalSpec(1.0, "none", "explicit", tuple(pairs))


def test_single_packet_system():
    cfg = ScenarioConfig(1, 1, Exponential(1.0), explicit((0.0, 0.0)), horizon=100.0, seed=3)
    tr = run(cfg, "p-maf-lgfs", RandomStreams(3)).trace
    x = RandomStreams(3).generator("service/1").standard_exponential(1)[0]
    assert tr.events == [Event(0.0, ARRIVAL, 1, 1, None), Event(0.0, SERVICE_START, 1, 1, 1),
                         Event(float(x), DELIVERY_SUCCESS, 1, 1, 1)]


def test_error_returns_packet_to_queue():
    # a lone packet with q=0.5: every error is followed by an immediate retransmission
    seen = 0
    for seed in range(1, 20):
        cfg = ScenarioConfig(1, 1, Exponential(1.0), explicit((0.0, 0.0)), 0.5, horizon=50.0, seed=seed)
        ev = run(cfg, "p-maf-lgfs", RandomStreams(seed)).trace.events
        for a, b in zip(ev, ev[1:]):
            if a.kind == DELIVERY_ERROR:
                seen += 1
                assert (b.time, b.kind, b.flow, b.seq) == (a.time, SERVICE_START, 1, 1)
        assert ev[-1].kind == DELIVERY_SUCCESS
    assert seen > 0


def test_empty_system_sawtooth():
    cfg = ScenarioConfig(2, 1, Exponential(1.0), explicit(), horizon=10.0, initial_age=(1.0, 4.0))
    r = run(cfg, "p-maf-lgfs", metrics=((AGE, P_AVG), (AGE, P_MAX)), sample_times=[7.0])
    assert len(r.trace) == 0
    assert r.samples[7.0][0] == (8.0, 11.0)
    # (1/10) * int_0^10 mean(1+t, 4+t) dt = 2.5 + 5
    assert r.penalties[metric_key(AGE, P_AVG)] == pytest.approx(7.5)
    assert r.penalties[metric_key(AGE, P_MAX)] == pytest.approx(9.0)


@pytest.mark.parametrize("mode", ["continuous", "discrete"])
def test_zero_horizon_gives_empty_trace(mode):
    if mode == DISCRETE:
        cfg = ScenarioConfig(2, 1, Deterministic(1.0), ArrivalSpec(0.5), mode=DISCRETE, horizon=0.0,
                             policy_spec="dt-maf-lgfs")
    else:
        cfg = ScenarioConfig(2, 1, horizon=0.0)
    assert len(run(cfg).trace) == 0


def test_discrete_serves_older_flow_first():
    cfg = ScenarioConfig(2, 1, Deterministic(1.0), explicit((0.0, 0.0)), 0.0, DISCRETE, 1.0, 4.0, 0,
                         "dt-maf-lgfs", (1.0, 3.0))
    ev = run(cfg).trace.events
    starts = [(e.time, e.flow) for e in ev if e.kind == SERVICE_START]
    assert starts[0] == (0, 2)
    assert (1, DELIVERY_SUCCESS, 2) in [(e.time, e.kind, e.flow) for e in ev]


def test_discrete_error_retries_next_slot():
    seen = 0
    for seed in range(1, 10):
        cfg = ScenarioConfig(1, 1, Deterministic(1.0), explicit((0.0, 0.0)), 0.5, DISCRETE, 1.0, 12.0, seed,
                             "dt-maf-lgfs")
        ev = run(cfg, streams=RandomStreams(seed)).trace.events
        for a, b in zip(ev, ev[1:]):
            if a.kind == DELIVERY_ERROR:
                seen += 1
                assert (b.time, b.kind, b.seq) == (a.time, SERVICE_START, a.seq)
    assert seen > 0


def test_discrete_times_are_slot_indices(disc_cfg):
    tr = run(disc_cfg).trace
    assert all(isinstance(e.time, int) for e in tr.events)
    assert tr.check() == []


def test_discrete_rejects_preemption():
    cfg = ScenarioConfig(2, 1, Deterministic(1.0), mode=DISCRETE, policy_spec="p-maf-lgfs")
    with pytest.raises(ConfigError):
        run(cfg)


def test_event_cap():
    cfg = ScenarioConfig(3, 2, Exponential(1.0), ArrivalSpec(1.0), horizon=100.0)
    with pytest.raises(SimulationDiverged):
        run(cfg, max_events=50)


def test_run_is_a_pure_function(cont_cfg):
    a = run(cont_cfg, "rand-lgfs", RandomStreams(5))
    b = run(cont_cfg, "rand-lgfs", RandomStreams(5))
    assert a.trace == b.trace and a.penalties == b.penalties


@pytest.mark.parametrize("policy", ["p-maf-lgfs", "np-masif-lgfs", "rand-fcfs", "np-maf-lgfs"])
def test_snapshots_replay_bit_exact(cont_cfg, policy):
    r = run(cont_cfg, policy, RandomStreams(5), record_epochs=True)
    rep = scan_epochs_match(r.trace, r.epochs, tol=0.0)
    assert rep.ok and rep.checked == len(r.epochs)
    assert r.trace.check(allow_overlap=False) == []


def test_replicated_copies_cancel_on_success():
    cfg = ScenarioConfig(3, 3, Exponential(1.0), ArrivalSpec(1.0), 0.0, horizon=100.0, seed=2,
                         policy_spec="p-maf-lgfs-r")
    ev = run(cfg).trace.events
    by_time = {}
    for e in ev:
        by_time.setdefault(e.time, []).append(e)
    n_success = 0
    for e in ev:
        if e.kind != DELIVERY_SUCCESS:
            continue
        n_success += 1
        same = [x for x in by_time[e.time] if (x.flow, x.seq) == (e.flow, e.seq) and x is not e
                and x.kind != SERVICE_START]
        assert all(x.kind == PREEMPTION for x in same)
    assert n_success > 10


def test_coupled_same_policy_twice_is_identical(cont_cfg):
    c = run_coupled(cont_cfg, ["p-maf-lgfs", "p-maf-lgfs"])
    a, b = c.traces
    assert a.events == b.events
    assert list(c.results) == ["p-maf-lgfs", "p-maf-lgfs'"]


def test_coupled_discrete_error_bits_shared(disc_cfg):
    c = run_coupled(disc_cfg, ["dt-maf-lgfs", "rand-lgfs"])
    logs = [r.coupling_log for r in c.results.values()]
    assert logs[0] == logs[1]
    assert len(logs[0]) == disc_cfg.horizon_slots
    assert any(any(bits) for _, bits in logs[0])


def test_coupled_deliveries_coincide_when_both_busy():
    cfg = ScenarioConfig(3, 2, Exponential(1.0), ArrivalSpec(4 / 3), 0.3, horizon=300.0, seed=3)
    c = run_coupled(cfg, ["p-maf-lgfs", "maf-fcfs"])
    idle = set(c.idle_epochs)
    done = []
    for tr in c.traces:
        done.append({e.time for e in tr.events if e.kind in (DELIVERY_SUCCESS, DELIVERY_ERROR)})
    both_busy = [t for t, u, _ in c.epoch_log if (t, u) not in idle]
    assert len(both_busy) > 100
    assert all(t in done[0] and t in done[1] for t in both_busy)
    # every completion in either trace is a shared epoch
    assert done[0] <= {t for t, _, _ in c.epoch_log} and done[1] <= {t for t, _, _ in c.epoch_log}


def test_coupled_arrivals_identical(cont_cfg):
    c = run_coupled(cont_cfg, ["p-maf-lgfs", "rand-fcfs", "maf-fcfs"])
    logs = [tr.arrival_log() for tr in c.traces]
    assert logs[0] == logs[1] == logs[2]


def test_coupling_preconditions():
    cfg = ScenarioConfig(3, 2, Deterministic(1.0), ArrivalSpec(1.0))
    with pytest.raises(ConfigError):
        run_coupled(cfg, ["p-maf-lgfs", "maf-fcfs"])
    cfg = ScenarioConfig(3, 2, Exponential(1.0), ArrivalSpec(1.0))
    with pytest.raises(ConfigError):
        run_coupled(cfg, ["p-maf-lgfs", "maf-lgfs-idle1"])


def test_single_replication_statistics(cont_cfg):
    st = replicate(cont_cfg, "p-maf-lgfs", R=1, base_seed=10)
    single = run(cont_cfg.replace(seed=11), "p-maf-lgfs", RandomStreams(11), record_trace=False)
    key = metric_key(AGE, P_AVG)
    assert st.mean[key] == single.penalties[key]
    assert st.halfwidth[key] == 0.0 and st.insufficient
    with pytest.raises(ConfigError):
        replicate(cont_cfg, "p-maf-lgfs", R=0)


def test_replicate_is_deterministic(cont_cfg):
    a = replicate(cont_cfg, "rand-lgfs", R=5, base_seed=3, metrics=((AGE, P_AVG), (ASI, P_MAX)))
    b = replicate(cont_cfg, "rand-lgfs", R=5, base_seed=3, metrics=((AGE, P_AVG), (ASI, P_MAX)))
    assert a == b
    assert a.seeds == [4, 5, 6, 7, 8]
    assert not a.insufficient


def test_halfwidth_is_normal_approximation(cont_cfg):
    st = replicate(cont_cfg, "p-maf-lgfs", R=6, base_seed=0)
    xs = st.values["age_avg"]
    mu = sum(xs) / len(xs)
    sd = math.sqrt(sum((x - mu) ** 2 for x in xs) / (len(xs) - 1))
    assert st.halfwidth["age_avg"] == pytest.approx(1.96 * sd / math.sqrt(len(xs)))


def test_saturated_single_flow_average_age():
    # a fresh packet at every integer, unit service: age runs 1 -> 2 each unit, mean 1.5
    cfg = ScenarioConfig(1, 1, Deterministic(1.0), ArrivalSpec(1.0, "none", "periodic"), 0.0,
                         horizon=2000.0, policy_spec="np-maf-lgfs", initial_age=(1.0,))
    st = replicate(cfg, None, R=2, base_seed=0)
    assert abs(st.mean["age_avg"] - 1.5) <= 0.05


def test_saturated_single_flow_slot_samples():
    # slot boundaries sample the sawtooth right after each delivery, where the age is 1
    cfg = ScenarioConfig(1, 1, Deterministic(1.0), ArrivalSpec(1.0, "none", "periodic"), 0.0, DISCRETE,
                         horizon=2000.0, policy_spec="dt-maf-lgfs", initial_age=(1.0,))
    assert run(cfg).penalties["age_avg"] == 1.0
