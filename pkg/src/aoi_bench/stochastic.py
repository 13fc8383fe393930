"""Seeded random streams, arrival/service/error generators and the NBU check."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .model import (
    DELAY_NONE,
    DELAY_ZERO_OR_FOUR,
    ArrivalSpec,
    ConfigError,
    Deterministic,
    Exponential,
    ShiftedExponential,
)

_BLOCK = 1024


class Stream:
    """One named random substream with buffered draws.

    Draws are taken from numpy in fixed-size blocks, so the sequence only
    depends on the seed and the order of calls, never on their timing.
    Blocks are filled on first use, so a stream that only ever draws one
    kind of variate yields exactly ``generator.<kind>(n)`` in bulk.
    """

    __slots__ = ("name", "_gen", "_u", "_ui", "_e", "_ei", "draws")

    def __init__(self, name: str, gen: np.random.Generator):
        self.name = name
        self._gen = gen
        self._u = self._e = None
        self._ui = self._ei = _BLOCK
        self.draws = 0

    def random(self) -> float:
        if self._ui == _BLOCK:
            self._u = self._gen.random(_BLOCK)
            self._ui = 0
        x = self._u[self._ui]
        self._ui += 1
        self.draws += 1
        return float(x)

    def standard_exponential(self) -> float:
        if self._ei == _BLOCK:
            self._e = self._gen.standard_exponential(_BLOCK)
            self._ei = 0
        x = self._e[self._ei]
        self._ei += 1
        self.draws += 1
        return float(x)

    def random_array(self, size: int) -> np.ndarray:
        """The next ``size`` uniforms, exactly as ``size`` calls to :meth:`random`."""
        parts = []
        need = size
        while need > 0:
            if self._ui == _BLOCK:
                self._u = self._gen.random(_BLOCK)
                self._ui = 0
            take = min(need, _BLOCK - self._ui)
            parts.append(self._u[self._ui:self._ui + take])
            self._ui += take
            need -= take
        self.draws += size
        return np.concatenate(parts) if parts else np.empty(0)

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return min(int(self.random() * n), n - 1)

    def uniform_block(self, size: int) -> np.ndarray:
        """Bulk uniforms straight from the generator (bypasses the buffer)."""
        self.draws += size
        return self._gen.random(size)


class RandomStreams:
    """Independent named substreams derived from one master seed.

    Each name maps to its own ``SeedSequence`` spawn key, so streams never
    share state and a given (seed, name) always replays the same sequence.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, Stream] = {}

    def generator(self, name: str) -> np.random.Generator:
        """A fresh generator positioned at the start of substream ``name``."""
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=(zlib.crc32(name.encode()),))
        return np.random.Generator(np.random.PCG64(ss))

    def stream(self, name: str) -> Stream:
        s = self._streams.get(name)
        if s is None:
            s = Stream(name, self.generator(name))
            self._streams[name] = s
        return s

    def is_fresh(self, name: str) -> bool:
        s = self._streams.get(name)
        return s is None or s.draws == 0

    @property
    def arrivals(self) -> Stream:
        return self.stream("arrivals")

    @property
    def errors(self) -> Stream:
        return self.stream("error_bits")

    @property
    def policy(self) -> Stream:
        return self.stream("policy")

    @property
    def epochs(self) -> Stream:
        return self.stream("epochs")

    def service(self, server_id: int) -> Stream:
        return self.stream(f"service/{server_id}")

    def draw_counts(self) -> dict:
        return {name: s.draws for name, s in sorted(self._streams.items())}


@dataclass(frozen=True)
class ArrivalBatch:
    """Synchronized generation/arrival times shared by all flows.

    Batch i (0-based) is packet seq i+1 of every flow.
    """

    s_gen: tuple
    a_arr: tuple

    def __len__(self):
        return len(self.s_gen)

    def check(self) -> list:
        errs = []
        for i, (s, a) in enumerate(zip(self.s_gen, self.a_arr)):
            if s > a:
                errs.append(f"batch {i}: S > A")
            if i and s < self.s_gen[i - 1]:
                errs.append(f"batch {i}: S decreasing")
        return errs


def gen_synchronized_arrivals(rate: float, horizon: float, streams: RandomStreams,
                              delay_model: str = DELAY_ZERO_OR_FOUR) -> ArrivalBatch:
    """Poisson(rate) generation times on [0, horizon] with random extra delay.

    Each packet's arrival lag is 0 or 4/rate with equal probability under the
    default delay model; arrivals may therefore come out of order.
    """
    if not rate > 0:
        raise ConfigError("generation rate must be positive")
    st = streams.arrivals
    lag = 4.0 / rate
    s_list, a_list = [], []
    t = 0.0
    while True:
        t += st.standard_exponential() / rate
        if t > horizon:
            break
        d = 0.0
        if delay_model == DELAY_ZERO_OR_FOUR:
            d = lag if st.random() >= 0.5 else 0.0
        elif delay_model != DELAY_NONE:
            raise ConfigError(f"unknown delay model {delay_model!r}")
        s_list.append(t)
        a_list.append(t + d)
    return ArrivalBatch(tuple(s_list), tuple(a_list))


def gen_slotted_arrivals(rate: float, n_slots: int, slot: float, streams: RandomStreams,
                         delay_model: str = DELAY_ZERO_OR_FOUR) -> ArrivalBatch:
    """Discrete analogue: one synchronized generation per slot w.p. min(1, rate*slot).

    Times are integer slot indices; the 4/rate lag is rounded to whole slots.
    """
    if not rate > 0:
        raise ConfigError("generation rate must be positive")
    st = streams.arrivals
    p = min(1.0, rate * slot)
    lag = int(round(4.0 / (rate * slot)))
    # per slot: one uniform for the generation, then one for the lag
    if delay_model == DELAY_ZERO_OR_FOUR:
        u = st.random_array(2 * n_slots).reshape(n_slots, 2)
        gen, lagged = u[:, 0] < p, u[:, 1] >= 0.5
    elif delay_model == DELAY_NONE:
        gen = st.random_array(n_slots) < p
        lagged = np.zeros(n_slots, dtype=bool)
    else:
        raise ConfigError(f"unknown delay model {delay_model!r}")
    ks = np.flatnonzero(gen)
    return ArrivalBatch(tuple(ks.tolist()), tuple((ks + lag * lagged[ks]).tolist()))


def arrivals_for(spec: ArrivalSpec, horizon: float, streams: RandomStreams, discrete: bool = False,
                 slot: float = 1.0) -> ArrivalBatch:
    if spec.kind == "explicit":
        pairs = sorted(spec.times)
        if discrete:
            pairs = [(int(s), int(a)) for s, a in pairs]
        return ArrivalBatch(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))
    if spec.kind == "periodic":
        if discrete:
            step = max(1, int(round(1.0 / (spec.gen_rate * slot))))
            ks = tuple(range(0, int(round(horizon / slot)), step))
            return ArrivalBatch(ks, ks)
        period = 1.0 / spec.gen_rate
        n = int(math.floor(horizon / period + 1e-9)) + 1
        ts = tuple(i * period for i in range(n))
        return ArrivalBatch(ts, ts)
    if discrete:
        return gen_slotted_arrivals(spec.gen_rate, int(round(horizon / slot)), slot, streams, spec.delay_model)
    return gen_synchronized_arrivals(spec.gen_rate, horizon, streams, spec.delay_model)


def service_sampler(dist, stream: Stream):
    """Return a zero-argument callable drawing service times from ``stream``."""
    if isinstance(dist, Exponential):
        if not dist.rate > 0:
            raise ConfigError("exponential rate must be positive")
        inv = 1.0 / dist.rate
        return lambda: stream.standard_exponential() * inv
    if isinstance(dist, ShiftedExponential):
        if not (dist.rate > 0 and dist.shift > 0):
            raise ConfigError("shifted_exponential shift and rate must be positive")
        inv, sh = 1.0 / dist.rate, dist.shift
        return lambda: sh + stream.standard_exponential() * inv
    if isinstance(dist, Deterministic):
        if not dist.value > 0:
            raise ConfigError("deterministic value must be positive")
        v = dist.value
        return lambda: v
    raise ConfigError(f"unsupported service distribution {dist!r}")


def sample_service_time(dist, streams: RandomStreams, server_id: int) -> float:
    return service_sampler(dist, streams.service(server_id))()


def draw_error_bit(q: float, streams: RandomStreams) -> bool:
    """True means the transmission failed."""
    if q <= 0.0:
        return False
    return streams.errors.random() < q


NBU_TOL = 1e-12


@dataclass
class NBUReport:
    holds: bool
    worst_slack: float
    worst_pair: tuple | None = None


def nbu_check(dist, grid) -> NBUReport:
    """Evaluate ccdf(tau+t) <= ccdf(tau)*ccdf(t) on every (tau, t) grid pair.

    ``worst_slack`` is the minimum of ccdf(tau)*ccdf(t) - ccdf(tau+t).
    """
    if not isinstance(dist, (Exponential, ShiftedExponential, Deterministic)):
        raise ConfigError(f"no analytic CCDF for {dist!r}")
    worst, at = math.inf, None
    for tau, t in grid:
        if isinstance(dist, Exponential):
            # exact identity; avoid rounding noise from two exp() calls
            slack = 0.0
        else:
            slack = dist.ccdf(tau) * dist.ccdf(t) - dist.ccdf(tau + t)
        if slack < worst:
            worst, at = slack, (tau, t)
    if at is None:
        return NBUReport(True, 0.0, None)
    return NBUReport(worst >= -NBU_TOL, worst, at)
