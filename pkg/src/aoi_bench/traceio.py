"""Trace export and reload (CSV or JSON lines), exact round trip.

Both formats start with one metadata record (arrival sequence, sizes,
horizon, initial ages, policy, mode). In CSV it is a ``# meta: {...}``
comment line ahead of the header ``time,kind,flow,packet_seq,server,s_gen``.
Floats are written with ``repr`` so they parse back to the same value.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .model import CONTINUOUS, DISCRETE, EVENT_KINDS, Event, EventTrace, TraceError

CSV_COLUMNS = ("time", "kind", "flow", "packet_seq", "server", "s_gen")
META_PREFIX = "# meta: "


def _num(x):
    return x if isinstance(x, int) else float(x)


def _meta(trace: EventTrace) -> dict:
    return {
        "n_flows": trace.n_flows,
        "n_servers": trace.n_servers,
        "horizon": trace.horizon,
        "initial_age": list(trace.initial_age),
        "policy": trace.policy,
        "mode": trace.mode,
        "time_unit": trace.time_unit,
        "s_gen": list(trace.s_gen),
        "a_arr": list(trace.a_arr),
    }


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def emit_trace(run_or_trace, path, fmt: str = "csv") -> Path:
    trace = getattr(run_or_trace, "trace", run_or_trace)
    if trace is None:
        raise TraceError("run has no recorded trace")
    path = Path(path)
    meta = json.dumps(_meta(trace), sort_keys=True)
    if fmt == "csv":
        with path.open("w", newline="") as fh:
            fh.write(META_PREFIX + meta + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for ev in trace.events:
                w.writerow([_fmt(ev.time), ev.kind, ev.flow, ev.seq, _fmt(ev.server),
                            _fmt(trace.s_gen[ev.seq - 1])])
    elif fmt == "jsonl":
        with path.open("w") as fh:
            fh.write(json.dumps({"meta": json.loads(meta)}, sort_keys=True) + "\n")
            for ev in trace.events:
                fh.write(json.dumps({"time": ev.time, "kind": ev.kind, "flow": ev.flow,
                                     "packet_seq": ev.seq, "server": ev.server}, sort_keys=True) + "\n")
    else:
        raise ValueError(f"unknown trace format {fmt!r}")
    return path


def _trace_from(meta: dict, events: list) -> EventTrace:
    try:
        discrete = meta["mode"] == DISCRETE
        conv = int if discrete else float
        return EventTrace(
            events=events,
            s_gen=tuple(conv(x) for x in meta["s_gen"]),
            a_arr=tuple(conv(x) for x in meta["a_arr"]),
            n_flows=int(meta["n_flows"]),
            n_servers=int(meta["n_servers"]),
            horizon=_num(meta["horizon"]),
            initial_age=tuple(_num(x) for x in meta["initial_age"]),
            policy=meta.get("policy", ""),
            mode=meta.get("mode", CONTINUOUS),
            time_unit=float(meta.get("time_unit", 1.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceError(f"bad trace metadata: {exc}") from None


def _event(time, kind, flow, seq, server, discrete: bool) -> Event:
    if kind not in EVENT_KINDS:
        raise TraceError(f"unknown event kind {kind!r}")
    t = int(time) if discrete else float(time)
    srv = None if server in ("", None) else int(server)
    return Event(t, kind, int(flow), int(seq), srv)


def load_trace(path, fmt: str | None = None) -> EventTrace:
    path = Path(path)
    fmt = fmt or ("jsonl" if path.suffix == ".jsonl" else "csv")
    text = path.read_text()
    lines = text.splitlines()
    if not lines:
        raise TraceError(f"{path}: empty file")
    try:
        if fmt == "csv":
            if not lines[0].startswith(META_PREFIX):
                raise TraceError(f"{path}: missing metadata line")
            meta = json.loads(lines[0][len(META_PREFIX):])
            rows = list(csv.reader(lines[1:]))
            if not rows or tuple(rows[0]) != CSV_COLUMNS:
                raise TraceError(f"{path}: unexpected CSV header")
            discrete = meta.get("mode") == DISCRETE
            events = [_event(r[0], r[1], r[2], r[3], r[4], discrete) for r in rows[1:]]
        elif fmt == "jsonl":
            meta = json.loads(lines[0])["meta"]
            discrete = meta.get("mode") == DISCRETE
            events = []
            for ln in lines[1:]:
                d = json.loads(ln)
                events.append(_event(d["time"], d["kind"], d["flow"], d["packet_seq"], d["server"], discrete))
        else:
            raise ValueError(f"unknown trace format {fmt!r}")
    except (json.JSONDecodeError, KeyError, IndexError) as exc:
        raise TraceError(f"{path}: malformed trace ({exc})") from None
    return _trace_from(meta, events)
