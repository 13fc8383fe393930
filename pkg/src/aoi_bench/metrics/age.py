"""Piecewise-linear age / ASI processes rebuilt from event traces."""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from ..model import DELIVERY_SUCCESS, SERVICE_START, EventTrace, TraceError
from .penalty import (
    PenaltySpec,
    _g_antiderivative,
    _table,
    evaluate_penalty,
    scheduled_segment_integral,
)

AGE, ASI = "age", "asi"


@dataclass
class AgeProcess:
    """Per-flow sawtooth ``x_n(t) = t - u_n(t)`` on ``[0, horizon]``.

    ``times[n]`` holds the reset instants of flow n+1 (starting at 0) and
    ``offsets[n]`` the offset in force from that instant on. Times are in
    trace units (slots in discrete mode); ``time_unit`` converts to seconds.
    """

    kind: str
    horizon: float
    times: list
    offsets: list
    time_unit: float = 1.0

    @property
    def n_flows(self) -> int:
        return len(self.times)

    def value(self, flow: int, t: float) -> float:
        i = bisect_right(self.times[flow - 1], t) - 1
        if i < 0:
            raise ValueError("t must be >= 0")
        return t - self.offsets[flow - 1][i]

    def vector(self, t: float) -> tuple:
        return tuple(self.value(f, t) for f in range(1, self.n_flows + 1))

    def breakpoints(self) -> list:
        pts = {0}
        for ts in self.times:
            pts.update(ts)
        return sorted(pts)

    def sweep(self, epochs: Iterable[float]):
        """Yield ``(t, values)`` for sorted epochs with one pass over the resets."""
        ptr = [0] * self.n_flows
        cur = [offs[0] for offs in self.offsets]
        for t in epochs:
            for n, ts in enumerate(self.times):
                j = ptr[n]
                while j + 1 < len(ts) and ts[j + 1] <= t:
                    j += 1
                if j != ptr[n]:
                    ptr[n] = j
                    cur[n] = self.offsets[n][j]
            yield t, [t - u for u in cur]

    @classmethod
    def stack(cls, procs: Sequence["AgeProcess"]) -> "AgeProcess":
        """Join single- or multi-flow processes into one (flows in order)."""
        if not procs:
            raise TraceError("no processes to stack")
        h = procs[0].horizon
        if any(p.horizon != h for p in procs):
            raise TraceError("mismatched horizons")
        times, offs = [], []
        for p in procs:
            times.extend(p.times)
            offs.extend(p.offsets)
        return cls(procs[0].kind, h, times, offs, procs[0].time_unit)


def build_age_process(trace: EventTrace, cfg=None, kind: str = AGE) -> AgeProcess:
    """Rebuild Δ (kind='age', resets at successful deliveries) or Ξ (kind='asi',
    resets at service starts). A reset by an older packet is a no-op."""
    if kind not in (AGE, ASI):
        raise TraceError(f"kind must be age or asi, got {kind!r}")
    n = trace.n_flows
    init = trace.initial_age if cfg is None else tuple(a / trace.time_unit for a in cfg.initial_age)
    if len(init) != n:
        raise TraceError("initial_age length differs from n_flows")
    times = [[0] for _ in range(n)]
    offs = [[-a] for a in init]
    trigger = DELIVERY_SUCCESS if kind == AGE else SERVICE_START
    n_batches = len(trace.s_gen)
    for ev in trace.events:
        if ev.kind != trigger:
            continue
        if not 1 <= ev.flow <= n or not 1 <= ev.seq <= n_batches:
            raise TraceError(f"event references unknown packet ({ev.flow},{ev.seq})")
        if ev.time < times[ev.flow - 1][-1]:
            raise TraceError("trace events out of order")
        s = trace.s_gen[ev.seq - 1]
        o = offs[ev.flow - 1]
        if s > o[-1]:
            ts = times[ev.flow - 1]
            if ts[-1] == ev.time:
                o[-1] = s
            else:
                ts.append(ev.time)
                o.append(s)
    return AgeProcess(kind, trace.horizon, times, offs, trace.time_unit)


def _as_process(proc_set) -> AgeProcess:
    if isinstance(proc_set, AgeProcess):
        return proc_set
    return AgeProcess.stack(list(proc_set))


def _separable(kind: str, spec: PenaltySpec, u: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    if kind == "avg" or (kind == "lnorm" and spec.l == 1):
        return float((0.5 * ((b - u) ** 2 - (a - u) ** 2)).sum())
    if kind == "ms":
        return float((((b - u) ** 3 - (a - u) ** 3) / 3.0).sum())
    xs, gs = _table(spec)
    return float((_g_antiderivative(xs, gs, b - u) - _g_antiderivative(xs, gs, a - u)).sum())


def penalty_integral(proc_set, spec: PenaltySpec, horizon: Optional[float] = None) -> float:
    """Integral over [0, horizon] of p_t(x(t)) dt, in seconds."""
    proc = _as_process(proc_set)
    h = proc.horizon if horizon is None else horizon
    if horizon is not None and horizon != proc.horizon:
        raise TraceError(f"mismatched horizons: {horizon} vs {proc.horizon}")
    unit = proc.time_unit
    n = proc.n_flows
    if h <= 0 or n == 0:
        return 0.0
    sep = not spec.schedule and (spec.kind in ("avg", "ms", "sum_penalty") or
                                 (spec.kind == "lnorm" and spec.l == 1))
    if sep:
        total = 0.0
        for ts, offs in zip(proc.times, proc.offsets):
            t = np.asarray([x for x in ts if x < h] + [h], dtype=float) * unit
            u = np.asarray(offs[: len(t) - 1], dtype=float) * unit
            total += _separable(spec.kind, spec, u, t[:-1], t[1:])
        if spec.kind in ("avg", "ms"):
            total /= n
        return total
    pts = [x for x in proc.breakpoints() if x < h] + [h]
    total = 0.0
    it = proc.sweep(pts[:-1])
    for (t0, vals), t1 in zip(it, pts[1:]):
        u = [(t0 - v) * unit for v in vals]
        total += scheduled_segment_integral(spec, u, t0 * unit, t1 * unit)
    return total


def time_average_penalty(proc_set, spec: PenaltySpec, horizon: Optional[float] = None) -> float:
    """(1/T) times the integral of p_t over [0, T]."""
    proc = _as_process(proc_set)
    h = proc.horizon if horizon is None else horizon
    if h <= 0:
        return 0.0
    return penalty_integral(proc, spec, horizon) / (h * proc.time_unit)


def slot_penalty_sum(proc_set, spec: PenaltySpec, n_slots: Optional[int] = None) -> float:
    """Sum over slots k = 0..H-1 of p(x(k)), ages in seconds (discrete traces)."""
    proc = _as_process(proc_set)
    H = int(proc.horizon if n_slots is None else n_slots)
    unit = proc.time_unit
    return sum(evaluate_penalty(spec, [v * unit for v in vals], k * unit)
               for k, vals in proc.sweep(range(H)))


def slot_average_penalty(proc_set, spec: PenaltySpec, n_slots: Optional[int] = None) -> float:
    proc = _as_process(proc_set)
    H = int(proc.horizon if n_slots is None else n_slots)
    return slot_penalty_sum(proc, spec, H) / H if H else 0.0
