import pytest

from aoi_bench.model import ConfigError, FlowQueue, Job, Packet, SystemSnapshot
from aoi_bench.policies import (
    FCFS,
    LGFS,
    MAF,
    MASIF,
    RAND,
    assign,
    dt_maf_lgfs_assign,
    np_masif_lgfs_assign,
    parse_policy,
    pmaf_lgfs_assign,
    pmaf_lgfs_r_assign,
    select_flow,
    select_packet,
)
from aoi_bench.stochastic import RandomStreams


def P(flow, seq, s, a=None):
    return Packet(flow, seq, s, s if a is None else a)


def fresh(ages, s=1.0, seq=1):
    return [P(f, seq, s) for f in range(1, len(ages) + 1)]


def test_maf_picks_argmax():
    snap = SystemSnapshot.build(0.0, (5, 2, 7), fresh((5, 2, 7)))
    assert select_flow(MAF, snap) == 3


def test_maf_tie_goes_to_lowest_flow():
    snap = SystemSnapshot.build(0.0, (5, 5, 2), fresh((5, 5, 2)))
    assert select_flow(MAF, snap) == 1


def test_masif_skips_already_assigned():
    snap = SystemSnapshot.build(0.0, (9, 9, 9), fresh((0, 0, 0)), asi=(1, 9, 9))
    assert select_flow(MASIF, snap, already_assigned={2}) == 3


def test_flow_selection_with_nothing_waiting():
    snap = SystemSnapshot.build(0.0, (1, 2))
    assert select_flow(MAF, snap) is None


def test_rand_needs_a_stream():
    snap = SystemSnapshot.build(0.0, (1, 2), fresh((1, 2)))
    with pytest.raises(ConfigError):
        select_flow(RAND, snap)
    assert select_flow(RAND, snap, rng=RandomStreams(0).policy) in (1, 2)


def test_lgfs_picks_latest_generation():
    pk = [P(1, 1, 1.0), P(1, 2, 3.0), P(1, 3, 2.0)]
    assert select_packet(LGFS, pk).s_gen == 3.0


def test_fcfs_picks_earliest_arrival():
    pk = [P(1, 1, 0.0, 4.0), P(1, 2, 1.0, 2.5)]
    assert select_packet(FCFS, pk).a_arr == 2.5


def test_lgfs_tie_goes_to_highest_seq():
    pk = [P(1, 7, 3.0), P(1, 8, 3.0)]
    assert select_packet(LGFS, pk).seq == 8


def test_select_packet_from_empty_queue_raises():
    with pytest.raises(ConfigError):
        select_packet(LGFS, [])


def test_flow_queue_orders_by_discipline():
    pk = [P(1, 1, 0.0, 5.0), P(1, 2, 1.0, 1.0), P(1, 3, 2.0, 3.0)]
    assert FlowQueue(LGFS, pk).peek().seq == 3
    assert FlowQueue(FCFS, pk).peek().seq == 2
    q = FlowQueue(LGFS, pk)
    q.remove(pk[0])
    assert sorted(p.seq for p in q) == [2, 3]


def test_pmaf_assigns_in_age_order():
    snap = SystemSnapshot.build(0.0, (5, 2, 7), fresh((5, 2, 7)), n_servers=2)
    out = pmaf_lgfs_assign(snap)
    assert [(e.server, e.packet.flow, e.preempts) for e in out] == [(1, 3, None), (2, 1, None)]


def test_pmaf_preempts_stale_service_for_fresh_batch():
    busy = [Job(1, 1, 0.0, 0.0), Job(2, 1, 0.0, 0.0)]
    snap = SystemSnapshot.build(3.0, (6, 4, 8), [P(f, 2, 2.0) for f in (1, 2, 3)], busy=busy, n_servers=2)
    out = pmaf_lgfs_assign(snap)
    assert len(out) == 2
    assert {e.packet.flow for e in out} == {3, 1}
    assert all(e.packet.seq == 2 and e.preempts is not None for e in out)
    # the flow-1 fresh packet replaces the flow-1 stale job on the same server
    assert next(e for e in out if e.packet.flow == 1).server == 1


def test_pmaf_keeps_a_job_that_is_still_preferred():
    busy = [Job(3, 2, 2.0, 2.5), None]
    snap = SystemSnapshot.build(3.0, (6, 4, 8), [P(1, 2, 2.0), P(2, 2, 2.0)], busy=busy, n_servers=2)
    out = pmaf_lgfs_assign(snap)
    assert [(e.server, e.packet.flow) for e in out] == [(2, 1)]


def test_pmaf_empty_queue():
    assert pmaf_lgfs_assign(SystemSnapshot.build(0.0, (1, 2), n_servers=2)) == []


def test_replication_copies_on_every_server():
    snap = SystemSnapshot.build(0.0, (5, 2, 7), fresh((5, 2, 7)), n_servers=3)
    out = pmaf_lgfs_r_assign(snap)
    assert [e.server for e in out] == [1, 2, 3]
    assert {(e.packet.flow, e.packet.seq) for e in out} == {(3, 1)}


def test_replication_empty_queue():
    assert pmaf_lgfs_r_assign(SystemSnapshot.build(0.0, (1, 2), n_servers=3)) == []


def test_masif_recomputes_asi_between_servers():
    pk = [P(1, 1, 4.0), P(1, 2, 9.0), P(2, 1, 9.0)]
    snap = SystemSnapshot.build(10.0, (10, 10), pk, n_servers=2, asi=(8, 3))
    out = np_masif_lgfs_assign(snap)
    # flow 1 starts its s=9 packet, so its ASI drops to 1 and flow 2 is next
    assert [(e.server, e.packet.flow, e.packet.seq) for e in out] == [(1, 1, 2), (2, 2, 1)]


def test_masif_skips_flow_already_in_service():
    busy = [Job(1, 1, 0.0, 0.0), None]
    pk = [P(1, 2, 1.0), P(2, 1, 0.5), P(3, 1, 0.5)]
    snap = SystemSnapshot.build(2.0, (5, 5, 5), pk, busy=busy, n_servers=2, asi=(9, 3, 4))
    out = np_masif_lgfs_assign(snap)
    assert [(e.server, e.packet.flow) for e in out] == [(2, 3)]


def test_nonpreemptive_all_busy():
    busy = [Job(1, 1, 0.0, 0.0), Job(2, 1, 0.0, 0.0)]
    snap = SystemSnapshot.build(1.0, (5, 5), fresh((5, 5), 0.5, 2), busy=busy, n_servers=2)
    assert np_masif_lgfs_assign(snap) == []
    assert dt_maf_lgfs_assign(snap) == []


def test_dt_maf_serves_two_oldest_flows():
    snap = SystemSnapshot.build(0.0, (4, 9, 1), fresh((4, 9, 1), 0.0), n_servers=2)
    out = dt_maf_lgfs_assign(snap)
    assert [e.packet.flow for e in out] == [2, 1]


def test_dt_maf_sends_stale_packets_to_leftover_server():
    # every flow's freshest packet is delivered (ages equal t - W), stale ones remain
    snap = SystemSnapshot.build(5.0, (1, 1, 1), [P(2, 1, 2.0)], n_servers=2)
    out = dt_maf_lgfs_assign(snap)
    assert [(e.server, e.packet.flow, e.packet.seq) for e in out] == [(1, 2, 1)]


def test_dt_maf_empty_queue():
    assert dt_maf_lgfs_assign(SystemSnapshot.build(0.0, (1, 2), n_servers=2)) == []


def test_shared_mode_puts_several_servers_on_one_flow():
    pk = [P(1, 1, 1.0), P(1, 2, 2.0), P(2, 1, 1.0)]
    snap = SystemSnapshot.build(3.0, (9, 2), pk, n_servers=3)
    out = assign(parse_policy("np-maf-lgfs"), snap)
    assert [(e.packet.flow, e.packet.seq) for e in out] == [(1, 2), (1, 1), (2, 1)]
    out = assign(parse_policy("maf-lgfs"), snap)
    assert [(e.packet.flow, e.packet.seq) for e in out] == [(1, 2), (2, 1)]


def test_idle_cap_limits_busy_servers():
    snap = SystemSnapshot.build(0.0, (3, 2, 1), fresh((3, 2, 1)), n_servers=3)
    assert len(assign(parse_policy("maf-lgfs-idle1"), snap)) == 1


def test_rand_assignment_is_pure_given_stream_state():
    snap = SystemSnapshot.build(0.0, (3, 2, 1, 4), fresh((3, 2, 1, 4)), n_servers=2)
    spec = parse_policy("rand-lgfs")
    a = assign(spec, snap, RandomStreams(9).policy)
    b = assign(spec, snap, RandomStreams(9).policy)
    assert a == b
    assert a.check() == []


def test_assignment_check():
    from aoi_bench.policies import AssignEntry, Assignment

    bad = Assignment([AssignEntry(1, P(1, 1, 0.0)), AssignEntry(1, P(1, 2, 0.0))])
    assert bad.check() == ["two entries target one server", "two entries serve one flow"]


@pytest.mark.parametrize("name, flow, pkt, pre, excl", [
    ("p-maf-lgfs", MAF, LGFS, True, True),
    ("np-masif-lgfs", MASIF, LGFS, False, True),
    ("np-maf-lgfs", MAF, LGFS, False, False),
    ("rand-fcfs", RAND, FCFS, False, True),
    ("p-maf-fcfs", MAF, FCFS, False, True),
    ("rand-lgfs-shared", RAND, LGFS, False, False),
])
def test_parse_policy(name, flow, pkt, pre, excl):
    s = parse_policy(name)
    assert (s.flow_discipline, s.packet_discipline, s.preemptive, s.exclusive) == (flow, pkt, pre, excl)


@pytest.mark.parametrize("bad", ["maf", "lifo-lgfs", "maf-lgfs-idlex", "maf-lgfs-fcfs"])
def test_parse_policy_rejects(bad):
    with pytest.raises(ConfigError):
        parse_policy(bad)
