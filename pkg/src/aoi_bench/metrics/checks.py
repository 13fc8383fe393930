"""Sample-path checks over traces: sorted dominance, ASI dominance, weak
work-efficiency and the per-trace invariant scans."""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from ..model import (
    ARRIVAL,
    DELIVERY_ERROR,
    DELIVERY_SUCCESS,
    DISCRETE,
    PREEMPTION,
    SERVICE_START,
    EventTrace,
    TraceError,
)
from ..policies import LGFS, MASIF, parse_policy
from .age import AGE, ASI, AgeProcess, build_age_process

CONT_TOL = 1e-9


@dataclass
class GroupState:
    """System state right after all events at ``time`` were applied."""

    time: float
    waiting: dict  # flow -> number of waiting packets
    serving: dict  # server -> (flow, seq)
    W: float  # max generation time among arrived packets


def replay(trace: EventTrace):
    """Yield a :class:`GroupState` after each group of equal-time events."""
    waiting_set = set()
    counts: dict = {}
    in_service: dict = {}
    serving: dict = {}
    delivered = set()
    W = float("-inf")

    def add(key):
        if key not in waiting_set:
            waiting_set.add(key)
            counts[key[0]] = counts.get(key[0], 0) + 1

    def drop(key):
        if key in waiting_set:
            waiting_set.discard(key)
            c = counts[key[0]] - 1
            if c:
                counts[key[0]] = c
            else:
                del counts[key[0]]

    events = trace.events
    i = 0
    while i < len(events):
        t = events[i].time
        while i < len(events) and events[i].time == t:
            ev = events[i]
            key = (ev.flow, ev.seq)
            if ev.kind == ARRIVAL:
                add(key)
                W = max(W, trace.s_gen[ev.seq - 1])
            elif ev.kind == SERVICE_START:
                drop(key)
                in_service[key] = in_service.get(key, 0) + 1
                serving[ev.server] = key
            else:
                serving.pop(ev.server, None)
                c = in_service.get(key, 0) - 1
                if c > 0:
                    in_service[key] = c
                else:
                    in_service.pop(key, None)
                if ev.kind == DELIVERY_SUCCESS:
                    delivered.add(key)
                    drop(key)
                elif c <= 0 and key not in delivered:
                    add(key)
            i += 1
        yield GroupState(t, dict(counts), dict(serving), W)


def schedulable(state: GroupState, exclusive: bool = True) -> bool:
    """Some waiting packet could be put on an idle server right now."""
    if not state.waiting:
        return False
    if not exclusive:
        return True
    busy_flows = {f for f, _ in state.serving.values()}
    return any(f not in busy_flows for f in state.waiting)


# ---------------------------------------------------------------------------
# Dominance


@dataclass
class DominanceReport:
    holds: bool
    first_violation: Optional[tuple] = None  # (t, rank i, value A, value B)
    n_epochs: int = 0
    n_violations: int = 0
    flags: list = field(default_factory=list)


def _same_arrivals(a: EventTrace, b: EventTrace) -> None:
    if a.n_flows != b.n_flows:
        raise TraceError("traces have different numbers of flows")
    if (tuple(a.s_gen), tuple(a.a_arr), tuple(a.initial_age)) != (tuple(b.s_gen), tuple(b.a_arr), tuple(b.initial_age)):
        raise TraceError("uncoupled traces: arrival logs differ")
    ra, rb = a.rows(ARRIVAL), b.rows(ARRIVAL)
    if not all(len(x) == len(y) and np.array_equal(x, y) for x, y in zip(ra, rb)):
        raise TraceError("uncoupled traces: arrival logs differ")


def _default_epochs(pa: AgeProcess, pb: AgeProcess, discrete: bool) -> list:
    if discrete:
        return list(range(int(max(pa.horizon, pb.horizon)) + 1))
    pts = set(pa.breakpoints()) | set(pb.breakpoints())
    return sorted(p for p in pts if p <= max(pa.horizon, pb.horizon))


def compare_sorted(pa: AgeProcess, pb: AgeProcess, epochs: Iterable[float], tol: float,
                   flag=None) -> DominanceReport:
    """Check sorted(pa(t)) <= sorted(pb(t)) + tol elementwise at each epoch.

    Both processes grow with slope 1 between resets, so the difference of the
    sorted vectors is constant between breakpoints; checking right-continuous
    values at all breakpoints therefore covers every t.
    """
    epochs = sorted(epochs)
    rep = DominanceReport(True)
    for (t, va), (_, vb) in zip(pa.sweep(epochs), pb.sweep(epochs)):
        rep.n_epochs += 1
        sa = sorted(va, reverse=True)
        sb = sorted(vb, reverse=True)
        for i, (x, y) in enumerate(zip(sa, sb), start=1):
            if x > y + tol:
                rep.holds = False
                rep.n_violations += 1
                if rep.first_violation is None:
                    rep.first_violation = (t, i, x, y)
                if flag is not None:
                    rep.flags.append((t, i, flag(t)))
                break
    return rep


def slot_ages(trace: EventTrace) -> np.ndarray:
    """Ages at every slot boundary 0..H (after that slot's deliveries), shape (H+1, N)."""
    H = int(trace.horizon)
    n = trace.n_flows
    if len(trace.initial_age) != n:
        raise TraceError("initial_age length differs from n_flows")
    t, f, seq = trace.rows(DELIVERY_SUCCESS)
    U = np.full((H + 1, n), -np.inf)
    U[0] = [-a for a in trace.initial_age]
    if len(t):
        t = np.asarray(t, dtype=np.int64)
        if f.min() < 1 or f.max() > n or seq.min() < 1 or seq.max() > len(trace.s_gen):
            raise TraceError("event references unknown packet")
        for g in range(1, n + 1):
            tg = t[f == g]
            if np.any(np.diff(tg) < 0):
                raise TraceError("trace events out of order")
        keep = t <= H
        s = np.asarray(trace.s_gen, dtype=float)[seq[keep] - 1]
        np.maximum.at(U, (t[keep], f[keep] - 1), s)
    U = np.maximum.accumulate(U, axis=0)
    return np.arange(H + 1, dtype=float)[:, None] - U


def _slot_dominance(traceA: EventTrace, traceB: EventTrace, tol: float) -> DominanceReport:
    sa = -np.sort(-slot_ages(traceA), axis=1)
    sb = -np.sort(-slot_ages(traceB), axis=1)
    H = min(len(sa), len(sb))
    bad = sa[:H] > sb[:H] + tol
    rows = np.flatnonzero(bad.any(axis=1))
    rep = DominanceReport(len(rows) == 0, n_epochs=H, n_violations=int(len(rows)))
    if len(rows):
        k = int(rows[0])
        i = int(np.argmax(bad[k]))
        rep.first_violation = (k, i + 1, float(sa[k, i]), float(sb[k, i]))
    return rep


def sorted_dominance_check(traceA: EventTrace, traceB: EventTrace, epochs: Optional[Iterable[float]] = None,
                           tol: Optional[float] = None) -> DominanceReport:
    """Sorted-age dominance of A over B (A's i-th largest age <= B's) at every epoch.

    Tolerance is 0 for discrete traces and 1e-9 for continuous ones. Discrete
    traces checked at every slot take a vectorized path.
    """
    _same_arrivals(traceA, traceB)
    discrete = traceA.mode == DISCRETE
    if discrete and epochs is None and traceA.horizon == traceB.horizon:
        return _slot_dominance(traceA, traceB, 0 if tol is None else tol)
    pa = build_age_process(traceA, kind=AGE)
    pb = build_age_process(traceB, kind=AGE)
    if tol is None:
        tol = 0 if discrete else CONT_TOL
    if epochs is None:
        epochs = _default_epochs(pa, pb, discrete)
    return compare_sorted(pa, pb, epochs, tol)


def _is_np_masif_lgfs(policy: str) -> bool:
    try:
        spec = parse_policy(policy)
    except Exception:
        return False
    return (spec.flow_discipline == MASIF and spec.packet_discipline == LGFS and not spec.preemptive
            and spec.work_conserving)


def asi_dominance_check(traceP: EventTrace, traceB: EventTrace, epochs: Optional[Iterable[float]] = None,
                        tol: float = CONT_TOL, xi: Optional[AgeProcess] = None) -> DominanceReport:
    """Sorted Ξ of NP-MASIF-LGFS against sorted Δ of a comparison trace.

    Violations carry a diagnostic flag telling whether P's queue was empty at
    that epoch. ``xi`` overrides P's rebuilt Ξ process (negative controls).
    """
    if not _is_np_masif_lgfs(traceP.policy):
        raise TraceError(f"traceP must come from np-masif-lgfs, got {traceP.policy!r}")
    if traceP.n_flows != traceB.n_flows:
        raise TraceError("traces have different numbers of flows")
    px = xi if xi is not None else build_age_process(traceP, kind=ASI)
    pb = build_age_process(traceB, kind=AGE)
    if epochs is None:
        epochs = _default_epochs(px, pb, traceP.mode == DISCRETE)
    states = list(replay(traceP))
    times = [s.time for s in states]

    def queue_empty(t):
        i = bisect_right(times, t) - 1
        return i < 0 or not states[i].waiting

    return compare_sorted(px, pb, epochs, tol, flag=queue_empty)


# ---------------------------------------------------------------------------
# Weak work-efficiency


@dataclass
class WorkEfficiencyReport:
    holds: bool
    n_intervals: int = 0
    n_checked: int = 0
    counterexamples: list = field(default_factory=list)


def service_intervals(trace: EventTrace) -> list:
    """Completed (start, end, server, flow, seq) intervals of a trace."""
    open_, out = {}, []
    for ev in trace.events:
        if ev.kind == SERVICE_START:
            open_[ev.server] = ev.time
        elif ev.kind in (DELIVERY_SUCCESS, DELIVERY_ERROR, PREEMPTION):
            start = open_.pop(ev.server, None)
            if start is not None and ev.kind != PREEMPTION:
                out.append((start, ev.time, ev.server, ev.flow, ev.seq))
    return out


def _exclusive(trace: EventTrace) -> bool:
    try:
        return parse_policy(trace.policy).exclusive
    except Exception:
        return True


def weak_work_efficiency_check(trace1: EventTrace, trace2: EventTrace) -> WorkEfficiencyReport:
    """For each completed service [tau, nu] of trace2 during which trace1 has a
    schedulable waiting packet throughout, trace1 must start some service in
    [tau, nu]."""
    for tr in (trace1, trace2):
        if any(ev.kind == PREEMPTION for ev in tr.events):
            raise TraceError("weak work-efficiency needs non-preemptive traces")
        try:
            if parse_policy(tr.policy).preemptive:
                raise TraceError("weak work-efficiency needs non-preemptive traces")
        except TraceError:
            raise
        except Exception:
            pass
    if (tuple(trace1.s_gen), tuple(trace1.a_arr)) != (tuple(trace2.s_gen), tuple(trace2.a_arr)):
        raise TraceError("traces do not share one arrival sequence")
    excl = _exclusive(trace1)
    states = list(replay(trace1))
    times = [s.time for s in states]
    bad_prefix = [0]
    for s in states:
        bad_prefix.append(bad_prefix[-1] + (0 if schedulable(s, excl) else 1))
    starts = sorted(ev.time for ev in trace1.events if ev.kind == SERVICE_START)
    rep = WorkEfficiencyReport(True)
    for tau, nu, server, f, seq in service_intervals(trace2):
        rep.n_intervals += 1
        i0 = bisect_right(times, tau) - 1
        i1 = bisect_left(times, nu) - 1
        if i0 < 0 or bad_prefix[i1 + 1] - bad_prefix[i0] > 0:
            continue
        rep.n_checked += 1
        j = bisect_left(starts, tau)
        if j < len(starts) and starts[j] <= nu:
            continue
        rep.holds = False
        rep.counterexamples.append((tau, nu, server, f, seq))
    return rep


# ---------------------------------------------------------------------------
# Invariant scans


@dataclass
class InvariantReport:
    name: str
    violations: list = field(default_factory=list)
    checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations


def scan_asi_below_age(trace: EventTrace) -> InvariantReport:
    rep = InvariantReport("asi<=age")
    pa = build_age_process(trace, kind=AGE)
    px = build_age_process(trace, kind=ASI)
    pts = sorted(set(pa.breakpoints()) | set(px.breakpoints()))
    for (t, a), (_, x) in zip(pa.sweep(pts), px.sweep(pts)):
        rep.checked += 1
        for n, (d, xi) in enumerate(zip(a, x), start=1):
            if xi > d:
                rep.violations.append((t, n, xi, d))
    return rep


def scan_slope_one(trace: EventTrace, epochs: list, kind: str = AGE, tol: float = 1e-9) -> InvariantReport:
    """``epochs`` are engine snapshots ``(t, ages, asis)``. Between consecutive
    snapshots, a flow with no reset event in (t0, t1] must grow by t1 - t0."""
    rep = InvariantReport(f"slope1:{kind}")
    proc = build_age_process(trace, kind=kind)
    idx = 1 if kind == AGE else 2
    for (t0, *v0), (t1, *v1) in zip(epochs, epochs[1:]):
        a0, a1 = v0[idx - 1], v1[idx - 1]
        for n in range(len(a0)):
            ts = proc.times[n]
            reset = bisect_right(ts, t1) - bisect_right(ts, t0) > 0
            if reset:
                continue
            rep.checked += 1
            if abs((a1[n] - a0[n]) - (t1 - t0)) > tol:
                rep.violations.append((t0, t1, n + 1, a1[n] - a0[n]))
    return rep


def scan_epochs_match(trace: EventTrace, epochs: list, tol: float = 0.0) -> InvariantReport:
    """Engine snapshots agree with the ages rebuilt from the trace."""
    rep = InvariantReport("replay")
    pa = build_age_process(trace, kind=AGE)
    px = build_age_process(trace, kind=ASI)
    ts = [e[0] for e in epochs]
    for (t, a, x), (_, ra), (_, rx) in zip(epochs, pa.sweep(ts), px.sweep(ts)):
        rep.checked += 1
        if any(abs(p - q) > tol for p, q in zip(a, ra)) or any(abs(p - q) > tol for p, q in zip(x, rx)):
            rep.violations.append(t)
    return rep


def _post_reset_min(trace: EventTrace, kind: str, trigger: str, name: str, tol: float) -> InvariantReport:
    rep = InvariantReport(name)
    proc = build_age_process(trace, kind=kind)
    W = float("-inf")
    events = trace.events
    i = 0
    while i < len(events):
        t = events[i].time
        j = i
        while j < len(events) and events[j].time == t:
            if events[j].kind == ARRIVAL:
                W = max(W, trace.s_gen[events[j].seq - 1])
            j += 1
        for ev in events[i:j]:
            if ev.kind != trigger:
                continue
            rep.checked += 1
            v = proc.value(ev.flow, t)
            if abs(v - (t - W)) > tol:
                rep.violations.append((t, ev.flow, v, t - W))
        i = j
    return rep


def scan_post_delivery_min(trace: EventTrace, tol: float = 1e-9) -> InvariantReport:
    """After each successful delivery the delivered flow's age is t - W(t)."""
    return _post_reset_min(trace, AGE, DELIVERY_SUCCESS, "post-delivery-min", tol)


def scan_post_start_min(trace: EventTrace, tol: float = 1e-9) -> InvariantReport:
    """After each service start the started flow's ASI is t - W(t)."""
    return _post_reset_min(trace, ASI, SERVICE_START, "post-start-min", tol)


def scan_work_conservation(trace: EventTrace) -> InvariantReport:
    rep = InvariantReport("work-conserving")
    spec = parse_policy(trace.policy)
    cap = trace.n_servers if spec.max_busy is None else min(spec.max_busy, trace.n_servers)
    for s in replay(trace):
        if s.time >= trace.horizon:  # the run stops before assigning at the horizon
            break
        rep.checked += 1
        if len(s.serving) < cap and schedulable(s, spec.exclusive):
            rep.violations.append(s.time)
    return rep


def scan_same_flow(trace: EventTrace) -> InvariantReport:
    rep = InvariantReport("same-flow")
    for s in replay(trace):
        rep.checked += 1
        flows = [f for f, _ in s.serving.values()]
        if len(flows) != len(set(flows)):
            rep.violations.append(s.time)
    return rep


def scan_no_preemption(trace: EventTrace) -> InvariantReport:
    rep = InvariantReport("no-preemption", checked=len(trace.events))
    rep.violations = [ev.time for ev in trace.events if ev.kind == PREEMPTION]
    return rep
