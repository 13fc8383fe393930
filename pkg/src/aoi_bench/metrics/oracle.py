"""Exhaustive optimum over causal non-preemptive schedules in slotted time.

The optimum is a finite-horizon dynamic program: at each slot boundary the
scheduler may start any set of waiting packets (at most one per flow, at most
M in total, idling allowed), each transmission then fails independently with
probability q. The expected objective is E[sum_{k<H} p(Δ(k))], computed
exactly with fractions for avg/max/ms.

DT-MAF-LGFS is evaluated separately by walking the same error tree while
letting the production policy code pick the action at every node.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from ..model import (
    DISCRETE,
    ArrivalSpec,
    ConfigError,
    Deterministic,
    FlowQueue,
    Packet,
    ScenarioConfig,
    SystemSnapshot,
)
from ..policies import dt_maf_lgfs_assign
from ..stochastic import RandomStreams, arrivals_for
from .penalty import P_AVG, P_MAX, P_MS, PenaltySpec, evaluate_penalty

MAX_FLOWS, MAX_SERVERS, MAX_SLOTS = 3, 2, 8
STATE_CAP = 2_000_000


class OracleTooLarge(ConfigError):
    """The instance exceeds the enumeration limits."""


@dataclass(frozen=True)
class OracleInstance:
    name: str
    n_flows: int
    n_servers: int
    initial_age: tuple  # in slots
    arrivals: tuple  # ((S_i, A_i), ...) in slots
    horizon: int
    error_prob: Fraction = Fraction(0)

    def to_config(self, policy: str = "dt-maf-lgfs", seed: int = 0) -> ScenarioConfig:
        return ScenarioConfig(
            self.n_flows, self.n_servers, Deterministic(1.0),
            ArrivalSpec(1.0, "none", "explicit", tuple((float(s), float(a)) for s, a in self.arrivals)),
            float(self.error_prob), DISCRETE, 1.0, float(self.horizon), seed, policy,
            tuple(float(a) for a in self.initial_age))


@dataclass
class OracleReport:
    instance: str
    penalty: str
    optimal_value: Fraction
    dt_maf_lgfs_value: Fraction
    n_states: int

    @property
    def match(self) -> bool:
        return self.optimal_value == self.dt_maf_lgfs_value


def _exact_penalty(spec: PenaltySpec, ages, t) -> Fraction:
    s = spec.at(t)
    n = len(ages)
    if s.kind == "avg":
        return Fraction(sum(ages), n)
    if s.kind == "max":
        return Fraction(max(ages))
    if s.kind == "ms":
        return Fraction(sum(a * a for a in ages), n)
    return Fraction(evaluate_penalty(s, ages, t))


def instance_from_config(cfg: ScenarioConfig) -> OracleInstance:
    if cfg.mode != DISCRETE:
        raise ConfigError("oracle needs a discrete scenario")
    ts = cfg.slot
    batch = arrivals_for(cfg.arrival_spec, cfg.horizon, RandomStreams(cfg.seed), discrete=True, slot=ts)
    init = []
    for a in cfg.initial_age:
        k = a / ts
        if k != int(k):
            raise ConfigError("initial ages must be whole slots")
        init.append(int(k))
    return OracleInstance("config", cfg.n_flows, cfg.n_servers, tuple(init),
                          tuple((int(s), int(a)) for s, a in zip(batch.s_gen, batch.a_arr)),
                          cfg.horizon_slots, Fraction(str(cfg.error_prob)))


def _check_size(inst: OracleInstance) -> None:
    if inst.n_flows > MAX_FLOWS or inst.n_servers > MAX_SERVERS or inst.horizon > MAX_SLOTS:
        raise OracleTooLarge(f"instance too large: need N<={MAX_FLOWS}, M<={MAX_SERVERS}, "
                             f"horizon<={MAX_SLOTS} slots")


def _outcomes(n_started: int, q: Fraction):
    """(failure bits, probability) for every joint outcome of the started jobs."""
    if q == 0:
        yield (False,) * n_started, Fraction(1)
        return
    for bits in itertools.product((False, True), repeat=n_started):
        pr = Fraction(1)
        for b in bits:
            pr *= q if b else 1 - q
        yield bits, pr


class _Solver:
    def __init__(self, inst: OracleInstance, spec: PenaltySpec):
        _check_size(inst)
        self.inst = inst
        self.spec = spec
        self.S = [s for s, _ in inst.arrivals]
        self.A = [a for _, a in inst.arrivals]
        self.q = Fraction(inst.error_prob)
        self.memo: dict = {}
        self.dt_memo: dict = {}

    def _arrived(self, k):
        return [i for i in range(len(self.S)) if self.A[i] <= k]

    def optimum(self, k: int, U: tuple, und: tuple) -> Fraction:
        """und[f] = frozenset of undelivered packet indices with S > U_f."""
        inst = self.inst
        if k == inst.horizon:
            return Fraction(0)
        key = (k, U, und)
        hit = self.memo.get(key)
        if hit is not None:
            return hit
        if len(self.memo) > STATE_CAP:
            raise OracleTooLarge("state space cap exceeded")
        cost = _exact_penalty(self.spec, [k - u for u in U], k)
        arrived = set(self._arrived(k))
        options = []
        for f in range(inst.n_flows):
            seen = {}
            for i in sorted(und[f]):
                if i in arrived:
                    seen.setdefault(self.S[i], i)
            options.append([None] + sorted(seen.values()))
        best = None
        for choice in itertools.product(*options):
            picks = [(f, i) for f, i in enumerate(choice) if i is not None]
            if len(picks) > inst.n_servers:
                continue
            exp = Fraction(0)
            for bits, pr in _outcomes(len(picks), self.q):
                U2, und2 = list(U), list(und)
                for (f, i), fail in zip(picks, bits):
                    if not fail:
                        U2[f] = max(U2[f], self.S[i])
                for f in range(inst.n_flows):
                    # a delivered packet now has S <= U_f and drops out
                    und2[f] = frozenset(j for j in und[f] if self.S[j] > U2[f])
                exp += pr * self.optimum(k + 1, tuple(U2), tuple(und2))
            if best is None or exp < best:
                best = exp
        val = cost + best
        self.memo[key] = val
        return val

    def dt_value(self, k: int, U: tuple, und: tuple) -> Fraction:
        """und[f] = frozenset of all undelivered packet indices of flow f."""
        inst = self.inst
        if k == inst.horizon:
            return Fraction(0)
        key = (k, U, und)
        hit = self.dt_memo.get(key)
        if hit is not None:
            return hit
        cost = _exact_penalty(self.spec, [k - u for u in U], k)
        queues = {f + 1: FlowQueue("LGFS") for f in range(inst.n_flows)}
        for f in range(inst.n_flows):
            for i in und[f]:
                if self.A[i] <= k:
                    queues[f + 1].push(Packet(f + 1, i + 1, self.S[i], self.A[i]))
        ages = tuple(k - u for u in U)
        snap = SystemSnapshot(k, ages, ages, queues, (None,) * inst.n_servers, inst.n_flows)
        picks = [(e.packet.flow - 1, e.packet.seq - 1) for e in dt_maf_lgfs_assign(snap)]
        exp = Fraction(0)
        for bits, pr in _outcomes(len(picks), self.q):
            U2, und2 = list(U), [set(s) for s in und]
            for (f, i), fail in zip(picks, bits):
                if not fail:
                    U2[f] = max(U2[f], self.S[i])
                    und2[f].discard(i)
            exp += pr * self.dt_value(k + 1, tuple(U2), tuple(frozenset(s) for s in und2))
        val = cost + exp
        self.dt_memo[key] = val
        return val


def discrete_optimality_oracle(small_cfg, penalty_spec: PenaltySpec = P_AVG) -> OracleReport:
    """Expected slot-sum penalty of the optimum and of DT-MAF-LGFS."""
    inst = small_cfg if isinstance(small_cfg, OracleInstance) else instance_from_config(small_cfg)
    sol = _Solver(inst, penalty_spec)
    U0 = tuple(-a for a in inst.initial_age)
    all_pk = frozenset(range(len(inst.arrivals)))
    und_opt = tuple(frozenset(i for i in all_pk if inst.arrivals[i][0] > U0[f]) for f in range(inst.n_flows))
    opt = sol.optimum(0, U0, und_opt)
    dt = sol.dt_value(0, U0, tuple(all_pk for _ in range(inst.n_flows)))
    return OracleReport(inst.name, penalty_spec.label, opt, dt, len(sol.memo))


HALF = Fraction(1, 2)

BUILTIN_INSTANCES = (
    OracleInstance("two-flows-max-order", 2, 1, (2, 5), ((0, 0),), 3),
    OracleInstance("single-flow", 1, 1, (0,), ((0, 0), (2, 2)), 5),
    OracleInstance("two-flows-errors", 2, 1, (0, 0), ((0, 0), (1, 1)), 4, HALF),
    OracleInstance("three-flows-out-of-order", 3, 1, (1, 4, 2), ((0, 0), (1, 3), (2, 2)), 6),
    OracleInstance("three-flows-two-servers", 3, 2, (0, 3, 1), ((0, 0), (2, 2), (3, 3)), 6),
    OracleInstance("three-flows-two-servers-errors", 3, 2, (2, 0, 1), ((0, 0), (1, 2)), 5, HALF),
    OracleInstance("two-by-two-errors", 2, 2, (0, 0), ((0, 0), (1, 1), (3, 3)), 6, HALF),
    OracleInstance("three-flows-one-server-errors", 3, 1, (0, 2, 5), ((0, 0), (2, 2)), 5, HALF),
    OracleInstance("lagged-arrivals", 2, 1, (3, 0), ((0, 1), (1, 1), (4, 4), (5, 7)), 8),
    OracleInstance("duplicate-generation", 3, 2, (1, 1, 1), ((0, 0), (0, 1), (2, 2), (3, 3)), 6, HALF),
    OracleInstance("periodic-errors", 2, 1, (0, 1), ((0, 0), (2, 2), (4, 4), (6, 6)), 8, HALF),
    OracleInstance("periodic-lag-two-servers", 3, 2, (4, 0, 2), ((0, 0), (2, 4), (4, 4), (6, 6)), 8),
)

ORACLE_PENALTIES = (P_AVG, P_MAX, P_MS)


def run_builtin(penalties=ORACLE_PENALTIES, instances=BUILTIN_INSTANCES) -> list:
    return [discrete_optimality_oracle(inst, p) for inst in instances for p in penalties]


def oracle_instance(name: str) -> Optional[OracleInstance]:
    return next((i for i in BUILTIN_INSTANCES if i.name == name), None)
