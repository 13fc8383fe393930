"""Property-based checks on penalties, age reconstruction and runs."""

import math

from hypothesis import given, settings, strategies as st

from aoi_bench import ArrivalSpec, Exponential, ScenarioConfig, run, run_coupled
from aoi_bench.metrics import build_age_process, evaluate_penalty, sorted_dominance_check
from aoi_bench.metrics.checks import scan_asi_below_age, scan_post_delivery_min, scan_same_flow
from aoi_bench.metrics.penalty import PenaltySpec
from aoi_bench.model import DELIVERY_SUCCESS, DISCRETE, Deterministic
from aoi_bench.policies import parse_policy
from aoi_bench.stochastic import RandomStreams

ages = st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=8)
specs = st.one_of(
    st.sampled_from([PenaltySpec("avg"), PenaltySpec("max"), PenaltySpec("ms")]),
    st.floats(1, 6).map(lambda l: PenaltySpec("lnorm", l=l)),
)


@given(specs, ages, st.randoms(use_true_random=False))
def test_penalty_symmetric(spec, a, rnd):
    b = list(a)
    rnd.shuffle(b)
    assert math.isclose(evaluate_penalty(spec, a), evaluate_penalty(spec, b), rel_tol=1e-12, abs_tol=1e-12)


@given(specs, ages, st.data())
def test_penalty_non_decreasing(spec, a, data):
    i = data.draw(st.integers(0, len(a) - 1))
    bump = data.draw(st.floats(0, 100))
    b = list(a)
    b[i] += bump
    pa, pb = evaluate_penalty(spec, a), evaluate_penalty(spec, b)
    assert pb >= pa - 1e-12 * max(1.0, pa)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10_000), st.sampled_from(["p-maf-lgfs", "np-masif-lgfs", "rand-fcfs", "np-maf-lgfs"]),
       st.floats(0, 0.6))
def test_age_matches_definition(seed, policy, q):
    cfg = ScenarioConfig(3, 2, Exponential(1.0), ArrivalSpec(0.8), q, horizon=60.0, seed=seed,
                         initial_age=(0.5, 1.5, 2.5))
    tr = run(cfg, policy, RandomStreams(seed)).trace
    proc = build_age_process(tr)
    deliveries = [(e.time, e.flow, tr.s_gen[e.seq - 1]) for e in tr.events if e.kind == DELIVERY_SUCCESS]
    for t in (0.0, 13.7, 30.0, 59.9):
        for f in (1, 2, 3):
            u = max([s for d, g, s in deliveries if g == f and d <= t], default=-cfg.initial_age[f - 1])
            assert proc.value(f, t) == t - u
    assert scan_asi_below_age(tr).ok
    if parse_policy(policy).exclusive:
        assert scan_same_flow(tr).ok
    if policy == "p-maf-lgfs":
        assert scan_post_delivery_min(tr).ok


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 10_000), st.sampled_from([0.0, 0.3, 0.5]), st.floats(0.2, 1.5),
       st.sampled_from(["np-maf-fcfs", "rand-lgfs", "rand-fcfs", "masif-lgfs"]))
def test_discrete_dominance_any_load(seed, q, lam, baseline):
    cfg = ScenarioConfig(3, 2, Deterministic(1.0), ArrivalSpec(lam), q, DISCRETE, 1.0, 400.0, seed, "dt-maf-lgfs",
                         (2.0, 0.0, 5.0))
    c = run_coupled(cfg, ["dt-maf-lgfs", baseline], metrics=())
    assert sorted_dominance_check(*c.traces).holds
