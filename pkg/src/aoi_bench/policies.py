"""Scheduling decisions: flow/packet disciplines and the policy assignment rules.

Every assign function reads a :class:`SystemSnapshot` (plus, for RAND, the
policy random stream) and returns an :class:`Assignment`; none of them touch
engine state.

Ties between flows go to the lowest flow id, ties between packets of a flow
to the highest sequence number (LGFS) or lowest (FCFS).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional

from .model import ConfigError, Packet, SystemSnapshot

MAF, MASIF, RAND = "MAF", "MASIF", "RAND"
LGFS, FCFS = "LGFS", "FCFS"


@dataclass(frozen=True)
class PolicySpec:
    name: str
    flow_discipline: str = MAF
    packet_discipline: str = LGFS
    preemptive: bool = False
    replication: bool = False
    # Same-flow exclusion: at most one server per flow at a time.
    exclusive: bool = True
    # Cap on simultaneously busy servers; None means work-conserving.
    max_busy: Optional[int] = None

    def __post_init__(self):
        if self.flow_discipline not in (MAF, MASIF, RAND):
            raise ConfigError(f"unknown flow discipline {self.flow_discipline!r}")
        if self.packet_discipline not in (LGFS, FCFS):
            raise ConfigError(f"unknown packet discipline {self.packet_discipline!r}")
        if self.replication and not (self.flow_discipline == MAF and self.packet_discipline == LGFS
                                     and self.preemptive):
            raise ConfigError("replication requires preemptive MAF-LGFS")

    @property
    def work_conserving(self) -> bool:
        return self.max_busy is None


PRESETS = {
    "p-maf-lgfs": PolicySpec("p-maf-lgfs", MAF, LGFS, preemptive=True),
    "p-maf-lgfs-r": PolicySpec("p-maf-lgfs-r", MAF, LGFS, preemptive=True, replication=True, exclusive=False),
    "np-masif-lgfs": PolicySpec("np-masif-lgfs", MASIF, LGFS),
    # The figure baseline: idle servers all go to the max-age flow while it
    # still has waiting packets, so several servers may share one flow.
    "np-maf-lgfs": PolicySpec("np-maf-lgfs", MAF, LGFS, exclusive=False),
    "dt-maf-lgfs": PolicySpec("dt-maf-lgfs", MAF, LGFS),
}


def parse_policy(name: str) -> PolicySpec:
    """Resolve a preset or a composed name such as ``rand-fcfs``.

    Composed grammar: ``[p-|np-|dt-]{maf,masif,rand}-{lgfs,fcfs}[-shared][-idle<k>]``.
    ``p-`` only preempts with LGFS; FCFS never has a fresher packet to preempt for.
    """
    if isinstance(name, PolicySpec):
        return name
    key = name.strip().lower()
    if key in PRESETS:
        return PRESETS[key]
    parts = key.split("-")
    preemptive = False
    if parts and parts[0] in ("p", "np", "dt"):
        preemptive = parts[0] == "p"
        parts = parts[1:]
    exclusive, max_busy = True, None
    while parts and (parts[-1] == "shared" or parts[-1].startswith("idle")):
        tail = parts.pop()
        if tail == "shared":
            exclusive = False
        else:
            try:
                max_busy = int(tail[4:])
            except ValueError:
                raise ConfigError(f"bad idle suffix in policy {name!r}") from None
    if len(parts) != 2:
        raise ConfigError(f"unknown policy {name!r}")
    flow, packet = parts[0].upper(), parts[1].upper()
    if flow not in (MAF, MASIF, RAND) or packet not in (LGFS, FCFS):
        raise ConfigError(f"unknown policy {name!r}")
    if packet == FCFS or flow != MAF:
        preemptive = False
    return PolicySpec(key, flow, packet, preemptive=preemptive, exclusive=exclusive, max_busy=max_busy)


class AssignEntry(NamedTuple):
    server: int
    packet: Packet
    preempts: Optional[tuple] = None  # (flow, seq) of the job it replaces


class Assignment(list):
    """List of :class:`AssignEntry`; one per server that changes packet."""

    def check(self, exclusive: bool = True) -> list:
        errs = []
        servers = [e.server for e in self]
        if len(servers) != len(set(servers)):
            errs.append("two entries target one server")
        if exclusive:
            flows = [e.packet.flow for e in self]
            if len(flows) != len(set(flows)):
                errs.append("two entries serve one flow")
        return errs


# ---------------------------------------------------------------------------
# Disciplines


def select_flow(discipline: str, snapshot: SystemSnapshot, already_assigned=(), rng=None,
                candidates: Optional[Iterable[int]] = None) -> Optional[int]:
    """Pick the next flow to serve.

    ``candidates`` defaults to flows with a waiting packet; ``already_assigned``
    flows are excluded. MAF maximizes age, MASIF maximizes age of served
    information, RAND draws uniformly from the remaining candidates.
    """
    if candidates is None:
        candidates = [f for f, q in snapshot.queue.items() if len(q)]
    excluded = set(already_assigned)
    cands = sorted(f for f in candidates if f not in excluded)
    if not cands:
        return None
    if discipline == RAND:
        if rng is None:
            raise ConfigError("RAND flow selection needs a random stream")
        return cands[rng.integer(len(cands))]
    vals = snapshot.age if discipline == MAF else snapshot.asi
    best = cands[0]
    bv = vals[best - 1]
    for f in cands[1:]:
        v = vals[f - 1]
        if v > bv:
            best, bv = f, v
    return best


def packet_key(discipline: str, p: Packet):
    """Sort key where the smallest key is served first."""
    if discipline == LGFS:
        return (-p.s_gen, -p.seq)
    return (p.a_arr, p.seq)


def select_packet(discipline: str, queue, flow_id: Optional[int] = None) -> Packet:
    """LGFS: latest generation (tie: highest seq). FCFS: earliest arrival (tie: lowest seq).

    ``queue`` is an iterable of packets, or a snapshot queue mapping when
    ``flow_id`` is given.
    """
    packets = queue[flow_id] if flow_id is not None and hasattr(queue, "keys") else queue
    cands = [p for p in packets if flow_id is None or p.flow == flow_id]
    if not cands:
        raise ConfigError(f"no schedulable packet for flow {flow_id}")
    return min(cands, key=lambda p: packet_key(discipline, p))


# ---------------------------------------------------------------------------
# Preemptive rules


def _best_undelivered(snapshot: SystemSnapshot, discipline: str) -> dict:
    """Per flow, the packet the discipline prefers among waiting and in-service ones."""
    best = {}
    for f, q in snapshot.queue.items():
        p = q.peek() if q.discipline == discipline else (select_packet(discipline, q) if len(q) else None)
        if p is not None:
            best[f] = p
    for j in snapshot.busy:
        if j is None:
            continue
        p = Packet(j.flow, j.seq, j.s_gen, j.s_gen)
        cur = best.get(j.flow)
        if cur is None or packet_key(discipline, p) < packet_key(discipline, cur):
            # a_arr is not needed for LGFS ordering of in-service jobs
            best[j.flow] = p
    return best


def pmaf_lgfs_assign(snapshot: SystemSnapshot) -> Assignment:
    """Preemptive MAF-LGFS over all servers.

    Flows are ranked by age (descending); each of the top M flows with an
    undelivered packet gets its freshest one. A flow whose freshest packet was
    delivered already has the minimum age, so it only receives a server once
    every fresher flow is covered, which is the leftover-server rule. Servers
    already holding a chosen packet keep it; others are preempted.
    """
    best = _best_undelivered(snapshot, LGFS)
    order = sorted(best, key=lambda f: (-snapshot.age[f - 1], f))
    desired = [best[f] for f in order[: snapshot.n_servers]]
    return _place(snapshot, desired)


def _place(snapshot: SystemSnapshot, desired: list) -> Assignment:
    held = {}
    for k, j in enumerate(snapshot.busy, start=1):
        if j is not None:
            held[(j.flow, j.seq)] = k
    out = Assignment()
    free_servers = [k for k, j in enumerate(snapshot.busy, start=1) if j is None]
    pending = []
    keep = set()
    for p in desired:
        k = held.get((p.flow, p.seq))
        if k is not None and k not in keep:
            keep.add(k)
        else:
            pending.append(p)
    # Preemptable servers: busy with a packet that is not kept. Prefer
    # replacing a job of the same flow on the same server.
    victims = [k for k, j in enumerate(snapshot.busy, start=1) if j is not None and k not in keep]
    by_flow = {snapshot.busy[k - 1].flow: k for k in victims}
    rest = []
    for p in pending:
        k = by_flow.pop(p.flow, None)
        if k is not None:
            victims.remove(k)
            j = snapshot.busy[k - 1]
            out.append(AssignEntry(k, p, (j.flow, j.seq)))
        else:
            rest.append(p)
    for p in rest:
        if free_servers:
            out.append(AssignEntry(free_servers.pop(0), p, None))
        elif victims:
            k = victims.pop(0)
            j = snapshot.busy[k - 1]
            out.append(AssignEntry(k, p, (j.flow, j.seq)))
    out.sort(key=lambda e: e.server)
    return out


def pmaf_lgfs_r_assign(snapshot: SystemSnapshot) -> Assignment:
    """Every server carries a copy of the single MAF-LGFS packet.

    Copies already running are left alone; any server busy with another
    packet is preempted.
    """
    best = _best_undelivered(snapshot, LGFS)
    if not best:
        return Assignment()
    f = min(best, key=lambda f: (-snapshot.age[f - 1], f))
    target = best[f]
    out = Assignment()
    for k, j in enumerate(snapshot.busy, start=1):
        if j is None:
            out.append(AssignEntry(k, target, None))
        elif (j.flow, j.seq) != (target.flow, target.seq):
            out.append(AssignEntry(k, target, (j.flow, j.seq)))
    return out


# ---------------------------------------------------------------------------
# Non-preemptive rules


def nonpreemptive_assign(spec, snapshot: SystemSnapshot, rng=None) -> Assignment:
    """Fill idle servers one at a time (lowest server id first).

    After each assignment the chosen flow's ASI is recomputed, which is what
    lets MASIF move on to other flows. With same-flow exclusion a flow already
    in service (or just assigned) is skipped; without it a flow stays eligible
    while it has waiting packets left.
    """
    idle = [k + 1 for k, j in enumerate(snapshot.busy) if j is None]
    if spec.max_busy is not None:
        busy_now = snapshot.n_servers - len(idle)
        idle = idle[: max(0, spec.max_busy - busy_now)]
    if not idle:
        return Assignment()
    left = {f: len(q) for f, q in snapshot.queue.items() if len(q)}
    if spec.exclusive:
        for j in snapshot.busy:
            if j is not None:
                left.pop(j.flow, None)
    flow_d, pkt_d = spec.flow_discipline, spec.packet_discipline
    vals = list(snapshot.age if flow_d == MAF else snapshot.asi)
    taken: dict = {}
    out = Assignment()
    for k in idle:
        if not left:
            break
        cands = sorted(left)
        if flow_d == RAND:
            if rng is None:
                raise ConfigError("RAND flow selection needs a random stream")
            f = cands[rng.integer(len(cands))]
        else:
            f = cands[0]
            bv = vals[f - 1]
            for g in cands[1:]:
                if vals[g - 1] > bv:
                    f, bv = g, vals[g - 1]
        q = snapshot.queue[f]
        n_taken = taken.get(f, 0)
        if q.discipline == pkt_d:
            p = q.top(n_taken + 1)[-1] if n_taken else q.peek()
        else:
            p = sorted(q, key=lambda p: packet_key(pkt_d, p))[n_taken]
        taken[f] = n_taken + 1
        if spec.exclusive or left[f] == 1:
            del left[f]
        else:
            left[f] -= 1
        out.append(AssignEntry(k, p, None))
        if flow_d == MASIF:
            vals[f - 1] = min(vals[f - 1], snapshot.now - p.s_gen)
    return out


def np_masif_lgfs_assign(snapshot: SystemSnapshot) -> Assignment:
    return nonpreemptive_assign(PRESETS["np-masif-lgfs"], snapshot)


def dt_maf_lgfs_assign(snapshot: SystemSnapshot) -> Assignment:
    """Slot-boundary MAF-LGFS on idle servers, no preemption."""
    return nonpreemptive_assign(PRESETS["dt-maf-lgfs"], snapshot)


def assign(spec: PolicySpec, snapshot: SystemSnapshot, rng=None) -> Assignment:
    if spec.replication:
        return pmaf_lgfs_r_assign(snapshot)
    if spec.preemptive:
        return pmaf_lgfs_assign(snapshot)
    return nonpreemptive_assign(spec, snapshot, rng)
