"""Compiled kernel for plain continuous runs (no trace, no coupling).

Replications behind the figure sweeps and the gap certificate only need
time-average penalties, so they do not have to pay for event objects. The
kernel replays the reference loop in :func:`aoi_bench.engine.run_continuous`
step for step: same event grouping, same tie-breaks, and the same random
numbers, taken in bulk from the substreams the reference loop would use.
Tests compare both paths on many configurations.

Set ``AOI_BENCH_FASTPATH=0`` to force the reference loop.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is optional
    numba = None

from .model import Deterministic, Exponential, ShiftedExponential
from .policies import LGFS, MAF, MASIF, RAND

_FLOW_CODE = {MAF: 0, MASIF: 1, RAND: 2}
_PEN_CODE = {"avg": 0, "max": 1, "ms": 2}

# kernel status codes
OK, NEED_SERVICE, NEED_ERRORS, NEED_POLICY, DIVERGED = 0, 1, 2, 3, 4


def enabled() -> bool:
    return numba is not None and os.environ.get("AOI_BENCH_FASTPATH", "1") != "0"


def eligible(spec, cfg, metrics, streams) -> bool:
    if not enabled() or spec.replication:
        return False
    if not isinstance(cfg.service_dist, (Exponential, ShiftedExponential, Deterministic)):
        return False
    for _, ps in metrics:
        if ps.schedule or ps.kind not in _PEN_CODE:
            return False
    names = ["error_bits", "policy"] + [f"service/{k + 1}" for k in range(cfg.n_servers)]
    return all(streams.is_fresh(nm) for nm in names)


def _jit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


@_jit
def _hpush(heap, size, f, x, key):
    i = size[f]
    heap[f, i] = x
    size[f] = i + 1
    while i > 0:
        p = (i - 1) >> 1
        if key[heap[f, p]] <= key[heap[f, i]]:
            break
        heap[f, p], heap[f, i] = heap[f, i], heap[f, p]
        i = p


@_jit
def _hsift(heap, size, f, i, key):
    n = size[f]
    while True:
        l = 2 * i + 1
        if l >= n:
            break
        c = l
        if l + 1 < n and key[heap[f, l + 1]] < key[heap[f, l]]:
            c = l + 1
        if key[heap[f, i]] <= key[heap[f, c]]:
            break
        heap[f, c], heap[f, i] = heap[f, i], heap[f, c]
        i = c


@_jit
def _hpop(heap, size, f, key):
    top = heap[f, 0]
    n = size[f] - 1
    size[f] = n
    if n > 0:
        heap[f, 0] = heap[f, n]
        _hsift(heap, size, f, 0, key)
    return top


@_jit
def _hremove(heap, size, f, x, key):
    if heap[f, 0] == x:
        _hpop(heap, size, f, key)
        return
    n = size[f]
    j = 0
    while heap[f, j] != x:
        j += 1
    n -= 1
    size[f] = n
    if j == n:
        return
    heap[f, j] = heap[f, n]
    # restore the heap property in both directions
    i = j
    while i > 0:
        p = (i - 1) >> 1
        if key[heap[f, p]] <= key[heap[f, i]]:
            break
        heap[f, p], heap[f, i] = heap[f, i], heap[f, p]
        i = p
    _hsift(heap, size, f, i, key)


@_jit
def _advance(tot, kinds, pens, s1, s2, mins, n, a, b):
    if b <= a:
        return
    for j in range(tot.shape[0]):
        pk = pens[j]
        c = kinds[j]
        if pk == 0:
            tot[j] += 0.5 * (b * b - a * a) - s1[c] / n * (b - a)
        elif pk == 1:
            x = b - mins[c]
            y = a - mins[c]
            tot[j] += 0.5 * (x * x - y * y)
        else:
            tot[j] += ((b * b * b - a * a * a) / 3.0 - (b * b - a * a) * s1[c] / n
                       + (b - a) * s2[c] / n)


@_jit
def _set_offset(off, c, i, new, s1, s2, mins):
    old = off[c, i]
    if new == old:
        return
    off[c, i] = new
    s1[c] += new - old
    s2[c] += new * new - old * old
    if old == mins[c] or new < mins[c]:
        m = off[c, 0]
        for g in range(1, off.shape[1]):
            if off[c, g] < m:
                m = off[c, g]
        mins[c] = m


@_jit
def _np_pick(t, n, m, off, s_gen, heap, hsize, pkey, svc_cnt, job, job_flow, vals,
             flow_d, exclusive, max_busy, pol_u, pol_ptr, picked):
    """Non-preemptive fill of idle servers, lowest id first.

    Starts the jobs (heap pop, job arrays, per-flow service counts) and writes
    the servers used into ``picked``. Returns (count, policy draws used so far);
    count is -1 when the policy uniforms ran out.
    """
    n_idle = 0
    for k in range(m):
        if job[k] < 0:
            n_idle += 1
    budget = n_idle
    if max_busy >= 0:
        budget = min(n_idle, max(0, max_busy - (m - n_idle)))
    for f in range(n):
        vals[f] = t - (off[0, f] if flow_d == 0 else off[1, f])
    cnt = 0
    for k in range(m):
        if budget == 0:
            break
        if job[k] >= 0:
            continue
        # candidate flows: waiting packets, and not in service when exclusive
        n_c = 0
        f = -1
        bv = 0.0
        for g in range(n):
            if hsize[g] == 0 or (exclusive and svc_cnt[g] > 0):
                continue
            n_c += 1
            if flow_d != 2 and (f < 0 or vals[g] > bv):
                f = g
                bv = vals[g]
        if n_c == 0:
            break
        if flow_d == 2:
            if pol_ptr >= pol_u.shape[0]:
                return -1, pol_ptr
            idx = min(int(pol_u[pol_ptr] * n_c), n_c - 1)
            pol_ptr += 1
            for g in range(n):
                if hsize[g] == 0 or (exclusive and svc_cnt[g] > 0):
                    continue
                if idx == 0:
                    f = g
                    break
                idx -= 1
        x = _hpop(heap, hsize, f, pkey)
        budget -= 1
        job[k] = x
        job_flow[k] = f
        svc_cnt[f] += 1
        picked[cnt] = k
        cnt += 1
        if flow_d == 1:
            w = t - s_gen[x]
            if w < vals[f]:
                vals[f] = w
    return cnt, pol_ptr


@_jit
def simulate(s_gen, a_arr, order, pkey, n, m, horizon, q, u0, s1_0, s2_0,
             flow_d, preemptive, exclusive, max_busy,
             svc_kind, svc_inv, svc_shift, svc_e, err_u, pol_u,
             kinds, pens, max_events):
    """Returns (status, totals, service draws per server, error draws, policy draws, epochs)."""
    nb = s_gen.shape[0]
    inf = math.inf
    # off[0] = U (delivered generation times), off[1] = V (started ones)
    off = np.empty((2, n))
    for f in range(n):
        off[0, f] = u0[f]
        off[1, f] = u0[f]
    s1 = np.empty(2)
    s2 = np.empty(2)
    mins = np.empty(2)
    for c in range(2):
        s1[c] = s1_0
        s2[c] = s2_0
        mm = u0[0]
        for f in range(1, n):
            if u0[f] < mm:
                mm = u0[f]
        mins[c] = mm
    tot = np.zeros(kinds.shape[0])
    heap = np.empty((n, max(nb, 1)), dtype=np.int64)
    hsize = np.zeros(n, dtype=np.int64)
    svc_cnt = np.zeros(n, dtype=np.int64)
    job = np.full(m, -1, dtype=np.int64)
    job_flow = np.full(m, -1, dtype=np.int64)
    done = np.full(m, inf)
    svc_ptr = np.zeros(m, dtype=np.int64)
    err_ptr = 0
    pol_ptr = 0
    waiting = 0
    arr_ptr = 0
    t_prev = 0.0
    n_events = 0
    vals = np.empty(n)
    # scratch for the preemptive placement
    desired_f = np.empty(m, dtype=np.int64)
    desired_x = np.empty(m, dtype=np.int64)
    desired_keep = np.empty(m, dtype=np.int64)
    keep = np.zeros(m, dtype=np.bool_)
    chosen = np.zeros(n, dtype=np.bool_)
    target = np.full(m, -1, dtype=np.int64)
    victim_of = np.full(n, -1, dtype=np.int64)
    picked = np.empty(m, dtype=np.int64)
    L = svc_e.shape[1]

    while True:
        t_arr = a_arr[order[arr_ptr]] if arr_ptr < nb else inf
        t_srv = inf
        for k in range(m):
            if done[k] < t_srv:
                t_srv = done[k]
        t = t_arr if t_arr <= t_srv else t_srv
        if t > horizon:
            break
        _advance(tot, kinds, pens, s1, s2, mins, n, t_prev, t)
        t_prev = t

        # completions
        for k in range(m):
            if done[k] == t:
                fail = False
                if q > 0:
                    if err_ptr >= err_u.shape[0]:
                        return NEED_ERRORS, tot, svc_ptr, err_ptr, pol_ptr, n_events
                    fail = err_u[err_ptr] < q
                    err_ptr += 1
                x = job[k]
                f = job_flow[k]
                job[k] = -1
                job_flow[k] = -1
                done[k] = inf
                svc_cnt[f] -= 1
                if not fail:
                    if s_gen[x] > off[0, f]:
                        _set_offset(off, 0, f, s_gen[x], s1, s2, mins)
                else:
                    _hpush(heap, hsize, f, x, pkey)
                    waiting += 1

        # arrivals
        while arr_ptr < nb and a_arr[order[arr_ptr]] == t:
            x = order[arr_ptr]
            arr_ptr += 1
            for f in range(n):
                _hpush(heap, hsize, f, x, pkey)
            waiting += n

        if waiting > 0:
            n_idle = 0
            for k in range(m):
                if job[k] < 0:
                    n_idle += 1
            if preemptive:
                # rank flows with an undelivered packet by age, keep the top m
                nd = 0
                for f in range(n):
                    chosen[f] = False
                for r in range(m):
                    best = -1
                    bv = 0.0
                    for f in range(n):
                        if chosen[f] or (hsize[f] == 0 and svc_cnt[f] == 0):
                            continue
                        v = t - off[0, f]
                        if best < 0 or v > bv:
                            best = f
                            bv = v
                    if best < 0:
                        break
                    chosen[best] = True
                    desired_f[nd] = best
                    # in-service job of this flow, if any
                    held = -1
                    for k in range(m):
                        if job_flow[k] == best:
                            if held < 0 or pkey[job[k]] < pkey[job[held]]:
                                held = k
                    if held >= 0 and (hsize[best] == 0 or pkey[job[held]] < pkey[heap[best, 0]]):
                        desired_x[nd] = job[held]
                        desired_keep[nd] = held
                    else:
                        desired_x[nd] = heap[best, 0]
                        desired_keep[nd] = -1
                    nd += 1
                for k in range(m):
                    keep[k] = False
                    target[k] = -1
                for i in range(nd):
                    if desired_keep[i] >= 0:
                        keep[desired_keep[i]] = True
                for f in range(n):
                    victim_of[f] = -1
                for k in range(m):
                    if job[k] >= 0 and not keep[k]:
                        victim_of[job_flow[k]] = k
                # pending packets first try a victim of the same flow
                n_rest = 0
                rest = np.empty(nd, dtype=np.int64)
                for i in range(nd):
                    if desired_keep[i] >= 0:
                        continue
                    k = victim_of[desired_f[i]]
                    if k >= 0:
                        victim_of[desired_f[i]] = -1
                        target[k] = i
                    else:
                        rest[n_rest] = i
                        n_rest += 1
                for r in range(n_rest):
                    i = rest[r]
                    placed = False
                    for k in range(m):
                        if job[k] < 0 and target[k] < 0:
                            target[k] = i
                            placed = True
                            break
                    if not placed:
                        for k in range(m):
                            if job[k] >= 0 and not keep[k] and target[k] < 0:
                                if victim_of[job_flow[k]] == k:
                                    victim_of[job_flow[k]] = -1
                                target[k] = i
                                break
                for k in range(m):
                    i = target[k]
                    if i < 0:
                        continue
                    if job[k] >= 0:
                        g = job_flow[k]
                        svc_cnt[g] -= 1
                        _hpush(heap, hsize, g, job[k], pkey)
                        waiting += 1
                    f = desired_f[i]
                    x = desired_x[i]
                    _hremove(heap, hsize, f, x, pkey)
                    waiting -= 1
                    job[k] = x
                    job_flow[k] = f
                    svc_cnt[f] += 1
                    if svc_ptr[k] >= L:
                        return NEED_SERVICE, tot, svc_ptr, err_ptr, pol_ptr, n_events
                    if svc_kind == 2:
                        done[k] = t + svc_shift
                    else:
                        e = svc_e[k, svc_ptr[k]]
                        svc_ptr[k] += 1
                        done[k] = t + (svc_shift + e * svc_inv if svc_kind == 1 else e * svc_inv)
                    if s_gen[x] > off[1, f]:
                        _set_offset(off, 1, f, s_gen[x], s1, s2, mins)
            elif n_idle > 0:
                cnt, pol_ptr = _np_pick(t, n, m, off, s_gen, heap, hsize, pkey, svc_cnt, job, job_flow, vals,
                                        flow_d, exclusive, max_busy, pol_u, pol_ptr, picked)
                if cnt < 0:
                    return NEED_POLICY, tot, svc_ptr, err_ptr, pol_ptr, n_events
                waiting -= cnt
                for r in range(cnt):
                    k = picked[r]
                    x = job[k]
                    f = job_flow[k]
                    if svc_kind != 2 and svc_ptr[k] >= L:
                        return NEED_SERVICE, tot, svc_ptr, err_ptr, pol_ptr, n_events
                    if svc_kind == 2:
                        done[k] = t + svc_shift
                    else:
                        e = svc_e[k, svc_ptr[k]]
                        svc_ptr[k] += 1
                        done[k] = t + (svc_shift + e * svc_inv if svc_kind == 1 else e * svc_inv)
                    if s_gen[x] > off[1, f]:
                        _set_offset(off, 1, f, s_gen[x], s1, s2, mins)
        n_events += 1
        if n_events > max_events:
            return DIVERGED, tot, svc_ptr, err_ptr, pol_ptr, n_events

    _advance(tot, kinds, pens, s1, s2, mins, n, t_prev, horizon)
    return OK, tot, svc_ptr, err_ptr, pol_ptr, n_events


def _service_params(dist):
    if isinstance(dist, Exponential):
        return 0, 1.0 / dist.rate, 0.0
    if isinstance(dist, ShiftedExponential):
        return 1, 1.0 / dist.rate, dist.shift
    return 2, 0.0, float(dist.value)


def _orderings(s_gen, a_arr, discipline):
    """Arrival processing order, and each packet's rank under the discipline
    (LGFS: latest generation, ties to the higher seq; FCFS: earliest arrival)."""
    nb = len(s_gen)
    seqs = np.arange(1, nb + 1, dtype=np.int64)
    order = np.lexsort((seqs, a_arr)).astype(np.int64)
    ranked = np.lexsort((-seqs, -s_gen)) if discipline == LGFS else order
    pkey = np.empty(nb, dtype=np.int64)
    pkey[ranked] = np.arange(nb, dtype=np.int64)
    return order, pkey


def run_fast(cfg, spec, streams, batch, metrics, max_events):
    """Returns (penalties dict, n_events) or raises SimulationDiverged."""
    from .engine import SimulationDiverged, metric_key

    n, m, horizon, q = cfg.n_flows, cfg.n_servers, float(cfg.horizon), float(cfg.error_prob)
    s_gen = np.asarray(batch.s_gen, dtype=float)
    a_arr = np.asarray(batch.a_arr, dtype=float)
    nb = len(s_gen)
    order, pkey = _orderings(s_gen, a_arr, spec.packet_discipline)

    u0 = [-float(a) for a in cfg.initial_age]
    s1_0 = math.fsum(u0)
    s2_0 = math.fsum(x * x for x in u0)
    kinds = np.array([0 if kind == "age" else 1 for kind, _ in metrics], dtype=np.int64)
    pens = np.array([_PEN_CODE[ps.kind] for _, ps in metrics], dtype=np.int64)
    svc_kind, svc_inv, svc_shift = _service_params(cfg.service_dist)

    # expected draws per server ~ busy time / E[X]; grow on demand
    mean = cfg.service_dist.mean
    L = int(1.3 * horizon / mean) + 64 if svc_kind != 2 else 1
    Le = int(1.3 * m * horizon / mean) + 64 if q > 0 else 0
    Lp = int(1.3 * m * horizon / mean) + 64 if spec.flow_discipline == RAND else 0
    while True:
        svc_e = np.empty((m, L))
        if svc_kind != 2:
            for k in range(m):
                svc_e[k] = streams.generator(f"service/{k + 1}").standard_exponential(L)
        err_u = streams.generator("error_bits").random(Le)
        pol_u = streams.generator("policy").random(Lp)
        status, tot, svc_ptr, err_ptr, pol_ptr, n_ev = simulate(
            s_gen, a_arr, order, pkey, n, m, horizon, q, np.asarray(u0, dtype=float), s1_0, s2_0,
            _FLOW_CODE[spec.flow_discipline], spec.preemptive, spec.exclusive,
            -1 if spec.max_busy is None else spec.max_busy,
            svc_kind, svc_inv, svc_shift, svc_e, err_u, pol_u, kinds, pens, max_events)
        if status == OK:
            break
        if status == DIVERGED:
            raise SimulationDiverged(f"more than {max_events} event epochs before horizon {horizon}")
        if status == NEED_SERVICE:
            L *= 2
        elif status == NEED_ERRORS:
            Le *= 2
        else:
            Lp *= 2
    # keep the draw bookkeeping identical to the reference loop
    for k in range(m):
        streams.stream(f"service/{k + 1}").draws += int(svc_ptr[k])
    streams.stream("error_bits").draws += int(err_ptr)
    streams.stream("policy").draws += int(pol_ptr)
    pens_out = {metric_key(kind, ps): (float(tot[j]) / horizon if horizon > 0 else 0.0)
                for j, (kind, ps) in enumerate(metrics)}
    return pens_out, int(n_ev)


# ---------------------------------------------------------------------------
# Slotted time

# event kind codes used by the discrete kernel, and their sort priority
_KINDS = ("delivery_success", "delivery_error", "arrival", "service_start")
_KIND_PRIO = np.array([0, 0, 2, 3], dtype=np.int64)


@_jit
def simulate_discrete(s_gen, a_arr, order, pkey, n, m, H, q, u0, flow_d, exclusive, max_busy,
                      err_u, pol_u):
    """Mirror of the reference slot loop; returns (status, policy draws, event columns)."""
    nb = s_gen.shape[0]
    cap = n * nb + 2 * m * (H + 1) + 16
    ev_t = np.empty(cap, dtype=np.int64)
    ev_k = np.empty(cap, dtype=np.int64)
    ev_f = np.empty(cap, dtype=np.int64)
    ev_x = np.empty(cap, dtype=np.int64)
    ev_s = np.empty(cap, dtype=np.int64)
    ne = 0
    off = np.empty((2, n))
    for f in range(n):
        off[0, f] = u0[f]
        off[1, f] = u0[f]
    heap = np.empty((n, max(nb, 1)), dtype=np.int64)
    hsize = np.zeros(n, dtype=np.int64)
    svc_cnt = np.zeros(n, dtype=np.int64)
    job = np.full(m, -1, dtype=np.int64)
    job_flow = np.full(m, -1, dtype=np.int64)
    bit_of = np.zeros(m, dtype=np.bool_)
    picked = np.empty(m, dtype=np.int64)
    vals = np.empty(n)
    waiting = 0
    arr_ptr = 0
    pol_ptr = 0
    for k in range(H + 1):
        for s in range(m):
            x = job[s]
            if x < 0:
                continue
            f = job_flow[s]
            job[s] = -1
            job_flow[s] = -1
            svc_cnt[f] -= 1
            ev_t[ne] = k
            ev_f[ne] = f
            ev_x[ne] = x
            ev_s[ne] = s + 1
            if bit_of[s]:
                ev_k[ne] = 1
                _hpush(heap, hsize, f, x, pkey)
                waiting += 1
            else:
                ev_k[ne] = 0
                if s_gen[x] > off[0, f]:
                    off[0, f] = s_gen[x]
            ne += 1
        if k == H:
            break
        while arr_ptr < nb and a_arr[order[arr_ptr]] <= k:
            x = order[arr_ptr]
            arr_ptr += 1
            for f in range(n):
                _hpush(heap, hsize, f, x, pkey)
                ev_t[ne] = k
                ev_k[ne] = 2
                ev_f[ne] = f
                ev_x[ne] = x
                ev_s[ne] = 0
                ne += 1
            waiting += n
        cnt = 0
        if waiting > 0:
            cnt, pol_ptr = _np_pick(float(k), n, m, off, s_gen, heap, hsize, pkey, svc_cnt, job, job_flow,
                                    vals, flow_d, exclusive, max_busy, pol_u, pol_ptr, picked)
            if cnt < 0:
                return NEED_POLICY, pol_ptr, ev_t[:ne], ev_k[:ne], ev_f[:ne], ev_x[:ne], ev_s[:ne]
            waiting -= cnt
            for r in range(cnt):
                s = picked[r]
                x = job[s]
                f = job_flow[s]
                ev_t[ne] = k
                ev_k[ne] = 3
                ev_f[ne] = f
                ev_x[ne] = x
                ev_s[ne] = s + 1
                ne += 1
                if s_gen[x] > off[1, f]:
                    off[1, f] = s_gen[x]
        if q > 0:
            # bits go to the started servers ranked by (U of the flow, flow, server)
            for i in range(1, cnt):
                j = i
                while j > 0:
                    a = picked[j - 1]
                    b = picked[j]
                    ua = off[0, job_flow[a]]
                    ub = off[0, job_flow[b]]
                    if ua < ub or (ua == ub and (job_flow[a] < job_flow[b]
                                                 or (job_flow[a] == job_flow[b] and a < b))):
                        break
                    picked[j - 1] = b
                    picked[j] = a
                    j -= 1
            for pos in range(cnt):
                bit_of[picked[pos]] = err_u[k * m + pos] < q
    return OK, pol_ptr, ev_t[:ne], ev_k[:ne], ev_f[:ne], ev_x[:ne], ev_s[:ne]


def discrete_eligible(spec, streams) -> bool:
    if not enabled() or spec.preemptive or spec.replication:
        return False
    return streams.is_fresh("error_bits") and streams.is_fresh("policy")


def run_fast_discrete(cfg, spec, streams, batch, U0, H):
    """Returns (sorted event columns, coupling log, n_events)."""
    from .model import EVENT_CODES

    n, m, q = cfg.n_flows, cfg.n_servers, float(cfg.error_prob)
    s_gen = np.asarray(batch.s_gen, dtype=float)
    a_arr = np.asarray(batch.a_arr, dtype=float)
    order, pkey = _orderings(s_gen, a_arr, spec.packet_discipline)
    err_u = streams.generator("error_bits").random(H * m) if q > 0 else np.empty(0)
    Lp = 2 * m * H + 64 if spec.flow_discipline == RAND else 0
    while True:
        pol_u = streams.generator("policy").random(Lp)
        status, pol_ptr, t, k, f, x, s = simulate_discrete(
            s_gen, a_arr, order, pkey, n, m, H, q, np.asarray(U0, dtype=float),
            _FLOW_CODE[spec.flow_discipline], spec.exclusive, -1 if spec.max_busy is None else spec.max_busy,
            err_u, pol_u)
        if status == OK:
            break
        Lp *= 2
    streams.stream("error_bits").draws += len(err_u)
    streams.stream("policy").draws += int(pol_ptr)
    log = []
    if q > 0:
        bits = (err_u.reshape(H, m) < q).tolist()
        log = [(i, tuple(b)) for i, b in enumerate(bits)]
    codes = np.array([EVENT_CODES.index(name) for name in _KINDS], dtype=np.int64)[k]
    idx = np.lexsort((s, f, x, _KIND_PRIO[k], t))
    cols = {"time": t[idx], "kind": codes[idx], "flow": f[idx] + 1, "seq": x[idx] + 1, "server": s[idx]}
    return cols, log, len(t)
