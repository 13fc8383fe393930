"""Domain types shared across the simulator: packets, scenarios, traces, snapshots."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, NamedTuple, Optional, Sequence

# Event kinds. Sort priority at equal times: deliveries, then preemptions,
# then arrivals, then service starts (a packet may arrive and start at once).
ARRIVAL = "arrival"
SERVICE_START = "service_start"
PREEMPTION = "preemption"
DELIVERY_SUCCESS = "delivery_success"
DELIVERY_ERROR = "delivery_error"

KIND_PRIORITY = {
    DELIVERY_SUCCESS: 0,
    DELIVERY_ERROR: 0,
    PREEMPTION: 1,
    ARRIVAL: 2,
    SERVICE_START: 3,
}
EVENT_KINDS = tuple(KIND_PRIORITY)

CONTINUOUS = "continuous"
DISCRETE = "discrete"


class ConfigError(ValueError):
    """Raised when a scenario or policy description cannot be used."""


class TraceError(ValueError):
    """Raised when a trace is malformed or incompatible with the requested check."""


# ---------------------------------------------------------------------------
# Service distributions


@dataclass(frozen=True)
class Exponential:
    rate: float

    type_name = "exponential"

    @property
    def mean(self) -> float:
        return 1.0 / self.rate

    def ccdf(self, x: float) -> float:
        return 1.0 if x < 0 else math.exp(-self.rate * x)

    def to_dict(self) -> dict:
        return {"type": "exponential", "rate": self.rate}


@dataclass(frozen=True)
class ShiftedExponential:
    shift: float
    rate: float

    type_name = "shifted_exponential"

    @property
    def mean(self) -> float:
        return self.shift + 1.0 / self.rate

    def ccdf(self, x: float) -> float:
        if x < self.shift:
            return 1.0
        return math.exp(-self.rate * (x - self.shift))

    def to_dict(self) -> dict:
        return {"type": "shifted_exponential", "shift": self.shift, "rate": self.rate}


@dataclass(frozen=True)
class Deterministic:
    value: float

    type_name = "deterministic"

    @property
    def mean(self) -> float:
        return self.value

    def ccdf(self, x: float) -> float:
        return 1.0 if x < self.value else 0.0

    def to_dict(self) -> dict:
        return {"type": "deterministic", "value": self.value}


ServiceDist = Exponential | ShiftedExponential | Deterministic


def dist_from_dict(d: dict) -> ServiceDist:
    kind = d.get("type")
    try:
        if kind == "exponential":
            return Exponential(float(d["rate"]))
        if kind == "shifted_exponential":
            return ShiftedExponential(float(d["shift"]), float(d["rate"]))
        if kind == "deterministic":
            return Deterministic(float(d["value"]))
    except KeyError as exc:
        raise ConfigError(f"distribution {kind!r} missing field {exc}") from None
    raise ConfigError(f"unsupported service distribution type {kind!r}")


# The only delay model used in the experiments: A_i - S_i is 0 or 4/lambda
# with equal probability.
DELAY_ZERO_OR_FOUR = "zero_or_4_over_lambda"
DELAY_NONE = "none"


@dataclass(frozen=True)
class ArrivalSpec:
    """How the synchronized generation/arrival sequence is produced.

    ``kind`` is ``poisson`` (Bernoulli per slot in discrete mode), ``periodic``
    (``S_i = i / gen_rate``) or ``explicit`` (``times`` lists ``(S_i, A_i)``).
    """

    gen_rate: float = 1.0
    delay_model: str = DELAY_ZERO_OR_FOUR
    kind: str = "poisson"
    times: tuple = ()

    def to_dict(self) -> dict:
        d = {"gen_rate": self.gen_rate, "delay_model": self.delay_model, "kind": self.kind}
        if self.kind == "explicit":
            d["times"] = [list(p) for p in self.times]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArrivalSpec":
        times = tuple((float(s), float(a)) for s, a in d.get("times", ()))
        return cls(
            gen_rate=float(d.get("gen_rate", 1.0)),
            delay_model=d.get("delay_model", DELAY_ZERO_OR_FOUR),
            kind=d.get("kind", "poisson"),
            times=times,
        )


@dataclass(frozen=True)
class ScenarioConfig:
    n_flows: int
    n_servers: int
    service_dist: ServiceDist = Exponential(1.0)
    arrival_spec: ArrivalSpec = ArrivalSpec()
    error_prob: float = 0.0
    mode: str = CONTINUOUS
    slot: float = 1.0
    horizon: float = 1000.0
    seed: int = 0
    policy_spec: str = "p-maf-lgfs"
    initial_age: Optional[tuple] = None

    def __post_init__(self):
        if self.initial_age is None:
            object.__setattr__(self, "initial_age", (0.0,) * self.n_flows)
        else:
            object.__setattr__(self, "initial_age", tuple(float(x) for x in self.initial_age))

    @property
    def horizon_slots(self) -> int:
        """Horizon as an integer slot count (discrete mode)."""
        return int(round(self.horizon / self.slot))

    def replace(self, **changes) -> "ScenarioConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        if "n_flows" in changes and "initial_age" not in changes:
            d["initial_age"] = None
        d.update(changes)
        return ScenarioConfig(**d)

    def to_dict(self) -> dict:
        return {
            "n_flows": self.n_flows,
            "n_servers": self.n_servers,
            "error_prob": self.error_prob,
            "mode": self.mode,
            "slot": self.slot,
            "service_dist": self.service_dist.to_dict(),
            "arrival_spec": self.arrival_spec.to_dict(),
            "horizon": self.horizon,
            "seed": self.seed,
            "policy_spec": self.policy_spec,
            "initial_age": list(self.initial_age),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        try:
            return cls(
                n_flows=int(d["n_flows"]),
                n_servers=int(d["n_servers"]),
                error_prob=float(d.get("error_prob", 0.0)),
                mode=d.get("mode", CONTINUOUS),
                slot=float(d.get("slot", 1.0)),
                service_dist=dist_from_dict(d.get("service_dist", {"type": "exponential", "rate": 1.0})),
                arrival_spec=ArrivalSpec.from_dict(d.get("arrival_spec", {})),
                horizon=float(d.get("horizon", 1000.0)),
                seed=int(d.get("seed", 0)),
                policy_spec=d.get("policy_spec", "p-maf-lgfs"),
                initial_age=d.get("initial_age"),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config field {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ScenarioConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(raw)


@dataclass
class ValidationReport:
    problems: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def __bool__(self) -> bool:
        return self.ok


def validate_scenario(cfg: ScenarioConfig) -> ValidationReport:
    """Check a scenario against the model constraints. Never raises."""
    from .policies import parse_policy  # local: policies imports model

    rep = ValidationReport()
    bad = rep.problems.append
    if cfg.n_flows < 1:
        bad("n_flows must be >= 1")
    if cfg.n_servers < 1:
        bad("n_servers must be >= 1")
    if not (0.0 <= cfg.error_prob < 1.0):
        bad("error_prob must be < 1 and >= 0")
    if cfg.mode not in (CONTINUOUS, DISCRETE):
        bad(f"mode must be continuous or discrete, got {cfg.mode!r}")
    if cfg.horizon < 0:
        bad("horizon must be >= 0")
    if len(cfg.initial_age) != cfg.n_flows:
        bad("initial_age must have one entry per flow")
    elif any(a < 0 for a in cfg.initial_age):
        bad("initial_age entries must be nonnegative")

    dist = cfg.service_dist
    if isinstance(dist, Exponential) and not dist.rate > 0:
        bad("exponential rate must be positive")
    if isinstance(dist, ShiftedExponential) and not (dist.rate > 0 and dist.shift > 0):
        bad("shifted_exponential shift and rate must be positive")
    if isinstance(dist, Deterministic) and not dist.value > 0:
        bad("deterministic value must be positive")

    arr = cfg.arrival_spec
    if arr.kind not in ("poisson", "periodic", "explicit"):
        bad(f"unknown arrival kind {arr.kind!r}")
    elif arr.kind != "explicit" and not arr.gen_rate > 0:
        bad("gen_rate must be positive")
    if arr.delay_model not in (DELAY_ZERO_OR_FOUR, DELAY_NONE):
        bad(f"unknown delay model {arr.delay_model!r}")
    if arr.kind == "explicit" and any(s > a or s < 0 for s, a in arr.times):
        bad("explicit arrivals need 0 <= S_i <= A_i")

    if cfg.mode == DISCRETE:
        if not cfg.slot > 0:
            bad("slot must be positive")
        if not isinstance(dist, Deterministic) or dist.value != cfg.slot:
            bad("discrete requires deterministic T_s service")
        if arr.kind == "explicit":
            for s, a in arr.times:
                if s != int(s) or a != int(a):
                    bad("discrete explicit arrivals must be integer slot indices")
                    break

    try:
        spec = parse_policy(cfg.policy_spec)
    except ConfigError as exc:
        bad(str(exc))
    else:
        if spec.replication and not isinstance(dist, Exponential):
            bad("replication policy requires exponential service")
        if cfg.mode == DISCRETE and (spec.preemptive or spec.replication):
            bad("discrete mode forbids preemption")
    return rep


# ---------------------------------------------------------------------------
# Packets and traces


class Packet(NamedTuple):
    """A packet waiting in (or serving from) the queue."""

    flow: int
    seq: int
    s_gen: float
    a_arr: float


class Attempt(NamedTuple):
    start: float
    end: float
    server: int
    outcome: str  # success | error | preempted


@dataclass
class PacketRecord:
    flow_id: int
    seq: int
    s_gen: float
    a_arr: float
    attempts: list = field(default_factory=list)
    v_first_start: Optional[float] = None
    d_deliver: Optional[float] = None

    def check(self, allow_overlap: bool = False) -> list:
        errs = []
        if not self.s_gen <= self.a_arr:
            errs.append("s_gen > a_arr")
        if self.v_first_start is not None and not self.a_arr <= self.v_first_start:
            errs.append("service started before arrival")
        if self.d_deliver is not None:
            if self.v_first_start is None or not self.v_first_start <= self.d_deliver:
                errs.append("delivery precedes first service start")
        succ = [at for at in self.attempts if at.outcome == "success"]
        if len(succ) > 1:
            errs.append("more than one successful attempt")
        if succ and succ[0].end != self.d_deliver:
            errs.append("d_deliver differs from successful attempt end")
        if not allow_overlap:
            spans = sorted((at.start, at.end) for at in self.attempts)
            for (s0, e0), (s1, e1) in zip(spans, spans[1:]):
                if s1 < e0:
                    errs.append("overlapping attempts")
                    break
        return errs


class Event(NamedTuple):
    time: float
    kind: str
    flow: int
    seq: int
    server: Optional[int]


def event_sort_key(ev: Event):
    return (ev.time, KIND_PRIORITY[ev.kind], ev.seq, ev.flow, ev.server or 0)


# integer codes for columnar traces, indexed by the kind code
EVENT_CODES = (DELIVERY_SUCCESS, DELIVERY_ERROR, PREEMPTION, ARRIVAL, SERVICE_START)


@dataclass
class EventTrace:
    """Time-ordered event log of one run plus what is needed to replay it.

    In discrete mode event times are integer slot indices and ``time_unit`` is
    the slot length; in continuous mode ``time_unit`` is 1.

    A trace may be built from sorted numpy columns (``time``, ``kind`` as an
    index into :data:`EVENT_CODES`, ``flow``, ``seq``, ``server`` with 0 for
    none) and ``events=None``; the event list is then materialized on first
    access, and column-aware checks can skip it entirely.
    """

    events: Optional[list]
    s_gen: tuple  # generation time of batch i (seq i+1), trace time units
    a_arr: tuple
    n_flows: int
    n_servers: int
    horizon: float
    initial_age: tuple
    policy: str = ""
    mode: str = CONTINUOUS
    time_unit: float = 1.0
    columns: Optional[dict] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.events is None:
            if self.columns is None:
                raise TraceError("trace needs events or columns")
            del self.events  # materialized by __getattr__ on demand

    def __getattr__(self, name):
        if name == "events":
            self.events = _events_from_columns(self.columns)
            return self.events
        raise AttributeError(name)

    def __len__(self):
        if "events" not in self.__dict__:
            return len(self.columns["time"])
        return len(self.events)

    def arrival_log(self) -> list:
        return [(e.time, e.flow, e.seq) for e in self.events if e.kind == ARRIVAL]

    def rows(self, kind: str):
        """(time, flow, seq) arrays of all events of one kind, in trace order."""
        import numpy as np

        if self.columns is not None:
            c = self.columns
            sel = c["kind"] == EVENT_CODES.index(kind)
            return c["time"][sel], c["flow"][sel], c["seq"][sel]
        rows = [(e.time, e.flow, e.seq) for e in self.events if e.kind == kind]
        if not rows:
            return np.empty(0), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        t, f, q = zip(*rows)
        return np.asarray(t), np.asarray(f, dtype=np.int64), np.asarray(q, dtype=np.int64)

    def packets(self) -> dict:
        """Rebuild a PacketRecord for every arrived packet, keyed by (flow, seq)."""
        recs = {}
        open_attempts = {}
        for ev in self.events:
            key = (ev.flow, ev.seq)
            if ev.kind == ARRIVAL:
                recs[key] = PacketRecord(ev.flow, ev.seq, self.s_gen[ev.seq - 1], self.a_arr[ev.seq - 1])
                continue
            rec = recs.get(key)
            if rec is None:
                raise TraceError(f"event for packet {key} before its arrival")
            if ev.kind == SERVICE_START:
                open_attempts[(key, ev.server)] = ev.time
                if rec.v_first_start is None:
                    rec.v_first_start = ev.time
            else:
                start = open_attempts.pop((key, ev.server), None)
                if start is None:
                    raise TraceError(f"{ev.kind} for {key} on server {ev.server} without service_start")
                outcome = {DELIVERY_SUCCESS: "success", DELIVERY_ERROR: "error", PREEMPTION: "preempted"}[ev.kind]
                rec.attempts.append(Attempt(start, ev.time, ev.server, outcome))
                if outcome == "success":
                    rec.d_deliver = ev.time
        return recs

    def check(self, allow_overlap: bool = False) -> list:
        """Structural invariants of the trace; returns a list of problems."""
        errs = []
        prev = None
        busy = {}
        for ev in self.events:
            if ev.kind not in KIND_PRIORITY:
                errs.append(f"unknown kind {ev.kind}")
                continue
            k = event_sort_key(ev)
            if prev is not None and k < prev:
                errs.append(f"events out of order at t={ev.time}")
            prev = k
            if ev.kind == SERVICE_START:
                if ev.server in busy:
                    errs.append(f"server {ev.server} started while busy at t={ev.time}")
                busy[ev.server] = (ev.flow, ev.seq)
            elif ev.kind in (DELIVERY_SUCCESS, DELIVERY_ERROR, PREEMPTION):
                if busy.get(ev.server) != (ev.flow, ev.seq):
                    errs.append(f"{ev.kind} on server {ev.server} without matching start at t={ev.time}")
                busy.pop(ev.server, None)
        try:
            for rec in self.packets().values():
                errs.extend(f"packet ({rec.flow_id},{rec.seq}): {e}" for e in rec.check(allow_overlap))
        except TraceError as exc:
            errs.append(str(exc))
        return errs


def _events_from_columns(c: dict) -> list:
    kinds = [EVENT_CODES[k] for k in c["kind"].tolist()]
    servers = [v if v else None for v in c["server"].tolist()]
    return list(map(Event._make, zip(c["time"].tolist(), kinds, c["flow"].tolist(), c["seq"].tolist(),
                                     servers)))


def sort_events(events: Iterable[Event]) -> list:
    return sorted(events, key=event_sort_key)


# ---------------------------------------------------------------------------
# Snapshots


class Job(NamedTuple):
    """A packet in service on one server."""

    flow: int
    seq: int
    s_gen: float
    start: float


class FlowQueue:
    """Waiting packets of one flow, ordered by a packet discipline.

    ``peek`` returns the packet the discipline would serve next. Only the
    engine mutates a queue; policies read it through a snapshot.
    """

    __slots__ = ("discipline", "_heap")

    def __init__(self, discipline: str = "LGFS", packets: Iterable[Packet] = ()):
        self.discipline = discipline
        self._heap = [(self._key(p), p) for p in packets]
        heapq.heapify(self._heap)

    def _key(self, p: Packet):
        if self.discipline == "LGFS":
            return (-p.s_gen, -p.seq)
        return (p.a_arr, p.seq)

    def push(self, p: Packet) -> None:
        heapq.heappush(self._heap, (self._key(p), p))

    def pop(self) -> Packet:
        return heapq.heappop(self._heap)[1]

    def remove(self, p: Packet) -> None:
        item = (self._key(p), p)
        if self._heap and self._heap[0] == item:
            heapq.heappop(self._heap)
            return
        self._heap.remove(item)
        heapq.heapify(self._heap)

    def peek(self) -> Optional[Packet]:
        return self._heap[0][1] if self._heap else None

    def top(self, k: int) -> list:
        return [p for _, p in heapq.nsmallest(k, self._heap)]

    def __len__(self):
        return len(self._heap)

    def __iter__(self):
        return (p for _, p in self._heap)


@dataclass
class SystemSnapshot:
    """Read-only view of the system at a decision epoch.

    Flow and server ids are 1-based: ``age[n-1]`` is flow n's age and
    ``busy[k-1]`` is the job on server k (or None).
    """

    now: float
    age: tuple
    asi: tuple
    queue: dict  # flow id -> FlowQueue of waiting packets
    busy: tuple
    n_flows: int = 0

    def __post_init__(self):
        if not self.n_flows:
            self.n_flows = len(self.age)

    @property
    def n_servers(self) -> int:
        return len(self.busy)

    def serving_flows(self) -> set:
        return {j.flow for j in self.busy if j is not None}

    def idle_servers(self) -> list:
        return [k + 1 for k, j in enumerate(self.busy) if j is None]

    def check(self, allow_same_flow: bool = False) -> list:
        errs = []
        for n, (x, d) in enumerate(zip(self.asi, self.age), start=1):
            if x > d + 1e-12:
                errs.append(f"asi > age for flow {n}")
            if d < -1e-12:
                errs.append(f"negative age for flow {n}")
        if not allow_same_flow:
            flows = [j.flow for j in self.busy if j is not None]
            if len(flows) != len(set(flows)):
                errs.append("two servers serve one flow")
        return errs

    @classmethod
    def build(cls, now: float, age: Sequence[float], packets: Iterable[Packet] = (),
              busy: Sequence = (), n_servers: int = 1, asi: Optional[Sequence[float]] = None,
              discipline: str = "LGFS") -> "SystemSnapshot":
        """Convenience constructor from plain packet lists (tests, tools)."""
        n = len(age)
        queue = {f: FlowQueue(discipline) for f in range(1, n + 1)}
        for p in packets:
            queue[p.flow].push(p)
        b = list(busy) + [None] * (n_servers - len(busy))
        return cls(now, tuple(age), tuple(asi if asi is not None else age), queue, tuple(b), n)


def to_jsonable(obj):
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    return obj
