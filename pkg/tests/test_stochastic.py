import math

import numpy as np
import pytest
from scipy import stats

from aoi_bench.model import ArrivalSpec, ConfigError, Deterministic, Exponential, ShiftedExponential
from aoi_bench.stochastic import (
    RandomStreams,
    arrivals_for,
    draw_error_bit,
    gen_slotted_arrivals,
    gen_synchronized_arrivals,
    nbu_check,
    service_sampler,
)


def test_same_seed_and_name_replay_bit_exact():
    a, b = RandomStreams(42), RandomStreams(42)
    xs = [a.stream("policy").random() for _ in range(3000)]
    ys = [b.stream("policy").random() for _ in range(3000)]
    assert xs == ys
    assert xs != [RandomStreams(43).stream("policy").random() for _ in range(3000)]


def test_streams_are_independent_of_each_other():
    a, b = RandomStreams(1), RandomStreams(1)
    for _ in range(500):
        a.stream("service/1").random()
    # draws on one substream never shift another
    assert a.stream("service/2").random() == b.stream("service/2").random()


def test_random_array_matches_scalar_draws():
    a, b = RandomStreams(3).arrivals, RandomStreams(3).arrivals
    a.random()
    b.random()
    arr = a.random_array(2500)
    assert arr.tolist() == [b.random() for _ in range(2500)]
    assert a.draws == b.draws == 2501


def test_integer_range():
    st = RandomStreams(0).policy
    xs = {st.integer(3) for _ in range(500)}
    assert xs == {0, 1, 2}


def test_poisson_count_concentration():
    # Oracle: a Poisson(1000) count lies in 1000 +- 3*sqrt(1000) with prob ~0.997.
    band = 3 * math.sqrt(1000)
    p_in = stats.poisson.cdf(1000 + band, 1000) - stats.poisson.cdf(1000 - band - 1, 1000)
    assert p_in > 0.99
    hits = 0
    for seed in range(200):
        n = len(gen_synchronized_arrivals(1.0, 1000.0, RandomStreams(seed)))
        hits += abs(n - 1000) <= band
    assert hits / 200 >= 0.99


def test_synchronized_arrivals_against_raw_generator():
    rate = 0.8
    streams = RandomStreams(11)
    batch = gen_synchronized_arrivals(rate, 50.0, streams)
    # independent oracle: the stream fills one exponential block, then one uniform block
    gen = streams.generator("arrivals")
    e = gen.standard_exponential(1024)
    u = gen.random(1024)
    s = np.cumsum(e / rate)
    n = int(np.searchsorted(s, 50.0, side="right"))
    assert batch.s_gen == tuple(s[:n].tolist())
    lag = np.where(u[:n] >= 0.5, 4.0 / rate, 0.0)
    assert batch.a_arr == tuple((s[:n] + lag).tolist())
    assert batch.check() == []


def test_zero_horizon_gives_empty_batch():
    assert len(gen_synchronized_arrivals(1.0, 0.0, RandomStreams(0))) == 0
    assert len(gen_slotted_arrivals(1.0, 0, 1.0, RandomStreams(0))) == 0


def test_slotted_arrivals_against_sequential_draws():
    rate, n_slots = 0.3, 400
    streams = RandomStreams(4)
    batch = gen_slotted_arrivals(rate, n_slots, 1.0, streams)
    u = streams.generator("arrivals").random(2 * n_slots)
    lag = round(4 / rate)
    s, a = [], []
    for k in range(n_slots):
        if u[2 * k] < rate:
            s.append(k)
            a.append(k + (lag if u[2 * k + 1] >= 0.5 else 0))
    assert batch.s_gen == tuple(s) and batch.a_arr == tuple(a)


def test_unknown_delay_model_is_rejected():
    with pytest.raises(ConfigError):
        gen_synchronized_arrivals(1.0, 10.0, RandomStreams(0), "sometimes")
    with pytest.raises(ConfigError):
        gen_slotted_arrivals(1.0, 10, 1.0, RandomStreams(0), "sometimes")


def test_periodic_and_explicit_arrivals():
    b = arrivals_for(ArrivalSpec(2.0, "none", "periodic"), 2.0, RandomStreams(0))
    assert b.s_gen == (0.0, 0.5, 1.0, 1.5, 2.0)
    b = arrivals_for(ArrivalSpec(kind="explicit", times=((3.0, 4.0), (1.0, 5.0))), 10.0, RandomStreams(0),
                     discrete=True)
    assert b.s_gen == (1, 3) and b.a_arr == (5, 4)


def test_deterministic_service_is_constant():
    draw = service_sampler(Deterministic(1.0), RandomStreams(0).service(1))
    assert {draw() for _ in range(100)} == {1.0}


@pytest.mark.parametrize("dist, mean", [(ShiftedExponential(1 / 3, 1.5), 1.0), (Exponential(2.0), 0.5)])
def test_service_sample_mean(dist, mean):
    draw = service_sampler(dist, RandomStreams(7).service(1))
    xs = [draw() for _ in range(1_000_000)]
    assert abs(sum(xs) / len(xs) - mean) <= 0.01


def test_zero_error_prob_never_fails():
    streams = RandomStreams(0)
    assert not any(draw_error_bit(0.0, streams) for _ in range(1000))


def test_error_fraction():
    streams = RandomStreams(8)
    n = 1_000_000
    frac = sum(draw_error_bit(0.3, streams) for _ in range(n)) / n
    assert abs(frac - 0.3) <= 0.002


def test_error_bit_replays():
    a, b = RandomStreams(5), RandomStreams(5)
    assert [draw_error_bit(0.5, a) for _ in range(200)] == [draw_error_bit(0.5, b) for _ in range(200)]


def test_nbu_exponential_has_zero_slack():
    rep = nbu_check(Exponential(1.0), [(a / 4, b / 4) for a in range(20) for b in range(20)])
    assert rep.holds and rep.worst_slack == 0.0


def test_nbu_shifted_exponential():
    d = ShiftedExponential(1 / 3, 1.5)
    assert d.ccdf(2 / 3) == pytest.approx(math.exp(-0.5))
    rep = nbu_check(d, [(1 / 3, 1 / 3), (0.5, 1.0), (2.0, 0.1)])
    assert rep.holds


def test_nbu_deterministic():
    rep = nbu_check(Deterministic(1.0), [(0.5, 0.6), (0.2, 0.3), (1.5, 0.0)])
    assert rep.holds
    assert Deterministic(1.0).ccdf(1.1) == 0.0
