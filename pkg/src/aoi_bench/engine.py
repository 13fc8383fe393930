"""Event-driven continuous loop, slotted discrete loop, coupled runs and replication.

Continuous runs process all events that share a timestamp as one group:
completions first, then arrivals, then a single call to the policy. Penalty
integrals are accumulated online so that long replications do not need to
keep traces around.

Coupled continuous runs use a single uniformized epoch stream of rate M*mu.
Each epoch draws a rank position u in [0, M) and one error bit; if at least
u+1 servers are busy, the server ranked u-th (busy servers sorted by the age
of the flow they serve, oldest first) completes. Each busy server therefore
completes at rate mu, exactly as in an uncoupled run, while every policy sees
the same epochs and bits.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .metrics.penalty import P_AVG, OnlineIntegrator, PenaltySpec, evaluate_penalty
from .model import (
    ARRIVAL,
    CONTINUOUS,
    DELIVERY_ERROR,
    DELIVERY_SUCCESS,
    DISCRETE,
    PREEMPTION,
    SERVICE_START,
    ConfigError,
    Event,
    EventTrace,
    Exponential,
    FlowQueue,
    Job,
    Packet,
    ScenarioConfig,
    SystemSnapshot,
    sort_events,
    validate_scenario,
)
from . import fastpath
from .policies import PolicySpec, assign, parse_policy
from .stochastic import ArrivalBatch, RandomStreams, arrivals_for, service_sampler

EVENT_CAP = 10**8

AGE, ASI = "age", "asi"


class SimulationDiverged(RuntimeError):
    """The event count cap was exceeded."""


def metric_key(kind: str, spec: PenaltySpec) -> str:
    return f"{kind}_{spec.label}"


def _norm_metrics(metrics) -> list:
    out = []
    for m in metrics:
        if isinstance(m, str):
            kind, _, pen = m.partition("_")
            m = (kind, PenaltySpec.parse(pen or "avg"))
        kind, spec = m
        if kind not in (AGE, ASI):
            raise ConfigError(f"metric kind must be age or asi, got {kind!r}")
        out.append((kind, spec))
    return out


@dataclass
class RunResult:
    policy: str
    clock: float
    trace: Optional[EventTrace] = None
    # metric key -> time average (continuous) or slot average (discrete)
    penalties: dict = field(default_factory=dict)
    # sample time -> (age tuple, asi tuple), right-continuous
    samples: dict = field(default_factory=dict)
    # (time, age tuple, asi tuple) after every event group, when requested
    epochs: Optional[list] = None
    # coupled continuous: (t, u, error) per epoch; discrete: (slot, bits)
    coupling_log: Optional[list] = None
    # coupled continuous: epochs whose drawn position was idle in this run
    idle_epochs: list = field(default_factory=list)
    # replication: busy time between consecutive completions of the group
    completion_gaps: Optional[list] = None
    draw_counts: dict = field(default_factory=dict)
    n_events: int = 0


@dataclass
class CoupledRunResult:
    results: dict  # policy name -> RunResult
    epoch_log: list
    # epochs where the drawn position was idle in some policies but busy in
    # others; only these break the shared-completion construction
    flagged: list
    # epochs where the drawn position was idle in at least one policy
    idle_epochs: list = field(default_factory=list)
    mode: str = CONTINUOUS

    def __getitem__(self, name):
        return self.results[name]

    @property
    def traces(self) -> list:
        return [r.trace for r in self.results.values()]


def _resolve(cfg: ScenarioConfig, policy) -> PolicySpec:
    spec = parse_policy(policy if policy is not None else cfg.policy_spec)
    rep = validate_scenario(cfg.replace(policy_spec=spec.name))
    if not rep.ok:
        raise ConfigError("; ".join(rep.problems))
    return spec


# ---------------------------------------------------------------------------
# Continuous time


def run_continuous(cfg: ScenarioConfig, policy=None, streams: Optional[RandomStreams] = None, *,
                   coupled: bool = False, metrics=((AGE, P_AVG),), sample_times: Sequence[float] = (),
                   record_trace: bool = True, record_epochs: bool = False, record_gaps: bool = False,
                   arrivals: Optional[ArrivalBatch] = None, max_events: int = EVENT_CAP) -> RunResult:
    spec = _resolve(cfg, policy)
    if cfg.mode != CONTINUOUS:
        raise ConfigError("run_continuous needs mode=continuous")
    if coupled and not isinstance(cfg.service_dist, Exponential):
        raise ConfigError("continuous coupling requires exponential service")
    streams = streams if streams is not None else RandomStreams(cfg.seed)
    n, m, horizon, q = cfg.n_flows, cfg.n_servers, float(cfg.horizon), cfg.error_prob
    batch = arrivals if arrivals is not None else arrivals_for(cfg.arrival_spec, horizon, streams)
    mets = _norm_metrics(metrics)
    plain = not (coupled or record_trace or record_epochs or record_gaps or sample_times)
    if plain and fastpath.eligible(spec, cfg, mets, streams):
        pens, n_ev = fastpath.run_fast(cfg, spec, streams, batch, mets, max_events)
        return RunResult(spec.name, horizon, None, pens, {}, None, None, [], None, streams.draw_counts(), n_ev)
    order = sorted(range(len(batch)), key=lambda i: (batch.a_arr[i], i))
    arr_ptr = 0

    U = [-float(a) for a in cfg.initial_age]
    V = list(U)
    queues = {f: FlowQueue(spec.packet_discipline) for f in range(1, n + 1)}
    waiting = 0
    busy: list = [None] * m
    done = [math.inf] * m
    copies: dict = {}

    integ = [(kind, OnlineIntegrator(ps, U if kind == AGE else V)) for kind, ps in mets]
    age_int = [it for kind, it in integ if kind == AGE]
    asi_int = [it for kind, it in integ if kind == ASI]
    samples_left = sorted(s for s in sample_times if 0 <= s <= horizon)
    samples: dict = {}
    s_ptr = 0
    events: list = []
    ev = events.append
    epochs = [] if record_epochs else None
    gaps = [] if record_gaps else None
    gap_anchor = None

    if coupled:
        mu_tot = m * cfg.service_dist.rate
        ep_stream = streams.epochs
        err_stream = streams.errors
        next_epoch = ep_stream.standard_exponential() / mu_tot
        coupling_log: Optional[list] = []
        idle_epochs: list = []
    else:
        samplers = [service_sampler(cfg.service_dist, streams.service(k + 1)) for k in range(m)]
        err_stream = streams.errors
        next_epoch = math.inf
        coupling_log = None
        idle_epochs = []

    policy_rng = streams.policy
    preemptive = spec.preemptive
    replication = spec.replication
    t = 0.0
    n_events = 0

    def deliver(k: int, now: float, success: bool) -> None:
        nonlocal waiting
        job = busy[k]
        busy[k] = None
        done[k] = math.inf
        f = job.flow
        if success:
            ev(Event(now, DELIVERY_SUCCESS, f, job.seq, k + 1))
            if job.s_gen > U[f - 1]:
                U[f - 1] = job.s_gen
                for it in age_int:
                    it.update(f - 1, job.s_gen)
            if replication:
                copies.pop((f, job.seq), None)
                for k2, j2 in enumerate(busy):
                    if j2 is not None and (j2.flow, j2.seq) == (f, job.seq):
                        ev(Event(now, PREEMPTION, f, job.seq, k2 + 1))
                        busy[k2] = None
                        done[k2] = math.inf
            return
        ev(Event(now, DELIVERY_ERROR, f, job.seq, k + 1))
        if replication:
            key = (f, job.seq)
            copies[key] -= 1
            if copies[key]:
                return
            del copies[key]
        queues[f].push(Packet(f, job.seq, job.s_gen, batch.a_arr[job.seq - 1]))
        waiting += 1

    while True:
        t_arr = batch.a_arr[order[arr_ptr]] if arr_ptr < len(order) else math.inf
        t_srv = next_epoch if coupled else min(done)
        t_next = t_arr if t_arr <= t_srv else t_srv
        if t_next > horizon:
            break
        t = t_next
        while s_ptr < len(samples_left) and samples_left[s_ptr] < t:
            s = samples_left[s_ptr]
            samples[s] = (tuple(s - u for u in U), tuple(s - v for v in V))
            s_ptr += 1
        for _, it in integ:
            it.advance(t)

        completed = False
        if coupled:
            if next_epoch == t:
                u = ep_stream.integer(m)
                bit = err_stream.random() < q if q > 0 else False
                coupling_log.append((t, u, bit))
                ranked = sorted((k for k in range(m) if busy[k] is not None),
                                key=lambda k: (U[busy[k].flow - 1], busy[k].flow, k))
                if u < len(ranked):
                    deliver(ranked[u], t, not bit)
                    completed = True
                else:
                    idle_epochs.append((t, u))
                next_epoch = t + ep_stream.standard_exponential() / mu_tot
        else:
            for k in range(m):
                if done[k] == t:
                    bit = err_stream.random() < q if q > 0 else False
                    deliver(k, t, not bit)
                    completed = True
        if completed and gaps is not None:
            if gap_anchor is not None:
                gaps.append(t - gap_anchor)
            gap_anchor = t

        while arr_ptr < len(order) and batch.a_arr[order[arr_ptr]] == t:
            i = order[arr_ptr]
            arr_ptr += 1
            s_i = batch.s_gen[i]
            for f in range(1, n + 1):
                queues[f].push(Packet(f, i + 1, s_i, t))
                ev(Event(t, ARRIVAL, f, i + 1, None))
            waiting += n

        if waiting:
            if preemptive or None in busy:
                snap = SystemSnapshot(t, tuple(t - u for u in U), tuple(t - v for v in V), queues,
                                      tuple(busy), n)
                for k1, p, pre in assign(spec, snap, policy_rng):
                    k = k1 - 1
                    if pre is not None:
                        old = busy[k]
                        ev(Event(t, PREEMPTION, old.flow, old.seq, k1))
                        busy[k] = None
                        done[k] = math.inf
                        okey = (old.flow, old.seq)
                        back = True
                        if replication:
                            copies[okey] -= 1
                            back = not copies[okey]
                            if back:
                                del copies[okey]
                        if back:
                            queues[old.flow].push(Packet(old.flow, old.seq, old.s_gen, batch.a_arr[old.seq - 1]))
                            waiting += 1
                    key = (p.flow, p.seq)
                    if not (replication and copies.get(key)):
                        queues[p.flow].remove(p)
                        waiting -= 1
                    if replication:
                        copies[key] = copies.get(key, 0) + 1
                    busy[k] = Job(p.flow, p.seq, p.s_gen, t)
                    if not coupled:
                        done[k] = t + samplers[k]()
                    ev(Event(t, SERVICE_START, p.flow, p.seq, k1))
                    if p.s_gen > V[p.flow - 1]:
                        V[p.flow - 1] = p.s_gen
                        for it in asi_int:
                            it.update(p.flow - 1, p.s_gen)
        if gaps is not None:
            if all(j is None for j in busy):
                gap_anchor = None
            elif gap_anchor is None:
                gap_anchor = t
        if epochs is not None:
            epochs.append((t, tuple(t - u for u in U), tuple(t - v for v in V)))
        n_events += 1
        if n_events > max_events:
            raise SimulationDiverged(f"more than {max_events} event epochs before horizon {horizon}")

    for _, it in integ:
        it.advance(horizon)
    for s in samples_left[s_ptr:]:
        samples[s] = (tuple(s - u for u in U), tuple(s - v for v in V))
    pens = {metric_key(kind, it.spec): (it.total / horizon if horizon > 0 else 0.0) for kind, it in integ}

    trace = None
    if record_trace:
        trace = EventTrace(sort_events(events), tuple(batch.s_gen), tuple(batch.a_arr), n, m, horizon,
                           tuple(cfg.initial_age), spec.name, CONTINUOUS, 1.0)
    return RunResult(spec.name, horizon, trace, pens, samples, epochs, coupling_log, idle_epochs, gaps,
                     streams.draw_counts(), n_events)


# ---------------------------------------------------------------------------
# Discrete time


def run_discrete(cfg: ScenarioConfig, policy=None, streams: Optional[RandomStreams] = None, *,
                 metrics=((AGE, P_AVG),), sample_times: Sequence[int] = (), record_trace: bool = True,
                 record_epochs: bool = False, arrivals: Optional[ArrivalBatch] = None,
                 max_events: int = EVENT_CAP) -> RunResult:
    """Slotted loop. Internally all times are integer slot indices.

    At each boundary k: complete the services started at k-1, admit arrivals
    with A = k, record ages, then assign idle servers. Error bits are drawn M
    per slot and indexed by rank position among the servers started in that
    slot (oldest served flow first), so coupled runs share them by seed.
    Penalties are slot averages (1/H) * sum_{k<H} p(ages at k) with ages in
    time units; samples and epochs are keyed by slot index.
    """
    spec = _resolve(cfg, policy)
    if cfg.mode != DISCRETE:
        raise ConfigError("run_discrete needs mode=discrete")
    if spec.preemptive:
        raise ConfigError("discrete mode forbids preemption")
    streams = streams if streams is not None else RandomStreams(cfg.seed)
    n, m, q, ts = cfg.n_flows, cfg.n_servers, cfg.error_prob, cfg.slot
    H = cfg.horizon_slots
    batch = arrivals if arrivals is not None else arrivals_for(cfg.arrival_spec, cfg.horizon, streams,
                                                               discrete=True, slot=ts)
    init = [a / ts for a in cfg.initial_age]
    U = [-int(round(a)) if float(a).is_integer() else -a for a in init]
    V = list(U)
    mets = _norm_metrics(metrics)
    if not (mets or sample_times or record_epochs) and fastpath.discrete_eligible(spec, streams):
        cols, log, n_ev = fastpath.run_fast_discrete(cfg, spec, streams, batch, U, H)
        if n_ev > max_events:
            raise SimulationDiverged(f"more than {max_events} events")
        trace = None
        if record_trace:
            trace = EventTrace(None, tuple(batch.s_gen), tuple(batch.a_arr), n, m, H, tuple(init), spec.name,
                               DISCRETE, ts, columns=cols)
        return RunResult(spec.name, H, trace, {}, {}, None, log, [], None, streams.draw_counts(), n_ev)
    order = sorted(range(len(batch)), key=lambda i: (batch.a_arr[i], i))
    arr_ptr = 0
    queues = {f: FlowQueue(spec.packet_discipline) for f in range(1, n + 1)}
    waiting = 0
    busy: list = [None] * m
    bit_of = [False] * m
    sums = [0.0] * len(mets)
    want = set(int(s) for s in sample_times)
    samples: dict = {}
    events: list = []
    ev = events.append
    epochs = [] if record_epochs else None
    log: list = []
    err = streams.errors
    rng = streams.policy

    for k in range(H + 1):
        for s in range(m):
            job = busy[s]
            if job is None:
                continue
            busy[s] = None
            f = job.flow
            if bit_of[s]:
                ev(Event(k, DELIVERY_ERROR, f, job.seq, s + 1))
                queues[f].push(Packet(f, job.seq, job.s_gen, batch.a_arr[job.seq - 1]))
                waiting += 1
            else:
                ev(Event(k, DELIVERY_SUCCESS, f, job.seq, s + 1))
                if job.s_gen > U[f - 1]:
                    U[f - 1] = job.s_gen
        if k == H:
            break
        while arr_ptr < len(order) and batch.a_arr[order[arr_ptr]] <= k:
            i = order[arr_ptr]
            arr_ptr += 1
            for f in range(1, n + 1):
                queues[f].push(Packet(f, i + 1, batch.s_gen[i], batch.a_arr[i]))
                ev(Event(k, ARRIVAL, f, i + 1, None))
            waiting += n
        if mets:
            ages = [(k - u) * ts for u in U]
            for j, (kind, ps) in enumerate(mets):
                vec = ages if kind == AGE else [(k - v) * ts for v in V]
                sums[j] += evaluate_penalty(ps, vec, k * ts)
        if want and k in want:
            samples[k] = (tuple((k - u) * ts for u in U), tuple((k - v) * ts for v in V))

        started = []
        if waiting:
            snap = SystemSnapshot(k, tuple(k - u for u in U), tuple(k - v for v in V), queues, tuple(busy), n)
            for k1, p, _ in assign(spec, snap, rng):
                s = k1 - 1
                queues[p.flow].remove(p)
                waiting -= 1
                busy[s] = Job(p.flow, p.seq, p.s_gen, k)
                ev(Event(k, SERVICE_START, p.flow, p.seq, k1))
                if p.s_gen > V[p.flow - 1]:
                    V[p.flow - 1] = p.s_gen
                started.append(s)
        if q > 0:
            bits = tuple(err.random() < q for _ in range(m))
            log.append((k, bits))
            ranked = sorted(started, key=lambda s: (U[busy[s].flow - 1], busy[s].flow, s))
            for pos, s in enumerate(ranked):
                bit_of[s] = bits[pos]
        if epochs is not None:
            epochs.append((k, tuple(k - u for u in U), tuple(k - v for v in V)))
        if len(events) > max_events:
            raise SimulationDiverged(f"more than {max_events} events")

    pens = {metric_key(kind, ps): (sums[j] / H if H else 0.0) for j, (kind, ps) in enumerate(mets)}
    trace = None
    if record_trace:
        trace = EventTrace(sort_events(events), tuple(batch.s_gen), tuple(batch.a_arr), n, m, H,
                           tuple(init), spec.name, DISCRETE, ts)
    return RunResult(spec.name, H, trace, pens, samples, epochs, log, [], None, streams.draw_counts(), len(events))


def run(cfg: ScenarioConfig, policy=None, streams: Optional[RandomStreams] = None, **kw) -> RunResult:
    if cfg.mode == DISCRETE:
        kw.pop("coupled", None)
        kw.pop("record_gaps", None)
        return run_discrete(cfg, policy, streams, **kw)
    return run_continuous(cfg, policy, streams, **kw)


# ---------------------------------------------------------------------------
# Coupled runs


def run_coupled(cfg: ScenarioConfig, policies: Sequence, seed: Optional[int] = None, **kw) -> CoupledRunResult:
    """Run every policy on the same arrivals, epochs and error bits.

    Each member run gets a fresh :class:`RandomStreams` from the same seed.
    The arrival, epoch and error streams are consumed identically by all of
    them (their draw counts never depend on the policy), which is what makes
    the shared randomness a coupling.
    """
    seed = cfg.seed if seed is None else seed
    specs = [parse_policy(p) for p in policies]
    names = []
    for s in specs:
        name = s.name
        while name in names:
            name += "'"
        names.append(name)
    if cfg.mode == CONTINUOUS:
        if not isinstance(cfg.service_dist, Exponential):
            raise ConfigError("continuous coupling requires exponential service")
        for s in specs:
            if not s.work_conserving:
                raise ConfigError(f"coupled continuous mode needs work-conserving policies; {s.name} idles")
            if s.replication:
                raise ConfigError("replication is not supported in coupled mode")
        kw["coupled"] = True
    results = {}
    for name, s in zip(names, specs):
        results[name] = run(cfg, s, RandomStreams(seed), **kw)
    first = next(iter(results.values()))
    log = first.coupling_log or []
    sets = [set(r.idle_epochs) for r in results.values()]
    union = set().union(*sets)
    common = set.intersection(*sets) if sets else set()
    return CoupledRunResult(results, log, sorted(union - common), sorted(union), cfg.mode)


# ---------------------------------------------------------------------------
# Replications


@dataclass
class RunStatistics:
    policy: str
    seeds: list
    values: dict  # metric key -> per-replication values (seed order)
    mean: dict
    halfwidth: dict
    insufficient: bool = False

    @property
    def replications(self) -> int:
        return len(self.seeds)


def _summarize(policy: str, seeds: list, per_rep: list) -> RunStatistics:
    keys = list(per_rep[0]) if per_rep else []
    values = {key: [r[key] for r in per_rep] for key in keys}
    mean, hw = {}, {}
    R = len(seeds)
    for key, xs in values.items():
        mu = math.fsum(xs) / R
        mean[key] = mu
        if R > 1:
            var = math.fsum((x - mu) ** 2 for x in xs) / (R - 1)
            hw[key] = 1.96 * math.sqrt(var / R)
        else:
            hw[key] = 0.0
    return RunStatistics(policy, seeds, values, mean, hw, R < 2)


def _one_rep(args):
    cfg, policy, seed, metrics = args
    res = run(cfg.replace(seed=seed), policy, RandomStreams(seed), metrics=metrics, record_trace=False)
    return res.penalties


def worker_count(n_tasks: int) -> int:
    cap = os.environ.get("AOI_BENCH_THREADS")
    try:
        cap = int(cap) if cap else (os.cpu_count() or 1)
    except ValueError:
        cap = 1
    return max(1, min(cap, n_tasks))


def map_tasks(fn, tasks: list) -> list:
    """Ordered map over a process pool sized by AOI_BENCH_THREADS."""
    w = worker_count(len(tasks))
    if w <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=w) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * w))))


def replicate(cfg: ScenarioConfig, policy=None, R: int = 10, base_seed: Optional[int] = None,
              metrics=((AGE, P_AVG),)) -> RunStatistics:
    """R independent runs with seeds base_seed+1 .. base_seed+R."""
    if R < 1:
        raise ConfigError("replications must be >= 1")
    spec = _resolve(cfg, policy)
    base = cfg.seed if base_seed is None else base_seed
    seeds = [base + r for r in range(1, R + 1)]
    mets = _norm_metrics(metrics)
    per_rep = map_tasks(_one_rep, [(cfg, spec, s, mets) for s in seeds])
    return _summarize(spec.name, seeds, per_rep)
