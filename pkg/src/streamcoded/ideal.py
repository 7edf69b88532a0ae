"""Non-causal ideal dispatch policy, compiled with numba.

Tasks stay in a central pool ordered by job; the moment a worker goes
idle it starts the head task of the oldest job with work left, with the
input transfer back-dated so computation begins immediately.  Output
transfers stay serialized per worker and the fusion node resolves a job
at its k-th result arrival; with purging on, a resolved job's undispatched
pool tasks are dropped.

The event loop is a tight jitted function: worker completions are found by
linear scan (P is small) and pending fusion arrivals live in a manual
binary heap keyed by (time, sequence number) for determinism.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

from .sim import Scenario, SimMetrics, SimResult, _deliveries, in_order_delay


@njit(cache=True)
def _heap_push(ht, hj, hs, hn, t, j, s):
    i = hn
    ht[i] = t
    hj[i] = j
    hs[i] = s
    while i > 0:
        parent = (i - 1) // 2
        if ht[i] < ht[parent] or (ht[i] == ht[parent] and hs[i] < hs[parent]):
            ht[i], ht[parent] = ht[parent], ht[i]
            hj[i], hj[parent] = hj[parent], hj[i]
            hs[i], hs[parent] = hs[parent], hs[i]
            i = parent
        else:
            break
    return hn + 1


@njit(cache=True)
def _heap_pop(ht, hj, hs, hn):
    t = ht[0]
    j = hj[0]
    hn -= 1
    ht[0] = ht[hn]
    hj[0] = hj[hn]
    hs[0] = hs[hn]
    i = 0
    while True:
        left = 2 * i + 1
        right = left + 1
        best = i
        if left < hn and (
            ht[left] < ht[best] or (ht[left] == ht[best] and hs[left] < hs[best])
        ):
            best = left
        if right < hn and (
            ht[right] < ht[best] or (ht[right] == ht[best] and hs[right] < hs[best])
        ):
            best = right
        if best == i:
            break
        ht[i], ht[best] = ht[best], ht[i]
        hj[i], hj[best] = hj[best], hj[i]
        hs[i], hs[best] = hs[best], hs[i]
        i = best
    return hn, t, j


@njit(cache=True)
def _kernel(dispatch, ntasks, k, task_mean, d_out, purge, cap_time, seed,
            collect, tr_job, tr_worker, tr_start, tr_finish):
    np.random.seed(seed)
    num_jobs = dispatch.shape[0]
    num_workers = task_mean.shape[0]

    remaining = np.zeros(num_jobs, np.int64)
    counts = np.zeros(num_jobs, np.int64)
    decode = np.full(num_jobs, -1.0)
    served_job = np.zeros(num_jobs, np.int64)
    free = np.full(num_workers, np.inf)
    cur_job = np.full(num_workers, -1, np.int64)
    outlink = np.zeros(num_workers)
    busy = np.zeros(num_workers)
    served_pw = np.zeros(num_workers, np.int64)

    heap_cap = num_jobs * ntasks + 2
    ht = np.empty(heap_cap)
    hj = np.empty(heap_cap, np.int64)
    hs = np.empty(heap_cap, np.int64)
    hn = 0
    seqc = 0

    pool_t = np.empty(num_jobs)
    pool_n = np.empty(num_jobs, np.int64)
    pool = 0
    jf = 0
    next_disp = 0
    decoded = 0
    purged = 0
    t_last = 0.0
    truncated = False
    tr_n = 0

    while decoded < num_jobs:
        t_disp = dispatch[next_disp] if next_disp < num_jobs else np.inf
        t_comp = np.inf
        pc = -1
        for p in range(num_workers):
            if cur_job[p] >= 0 and free[p] < t_comp:
                t_comp = free[p]
                pc = p
        t_arr = ht[0] if hn > 0 else np.inf

        if t_arr <= t_disp and t_arr <= t_comp:
            t, ev = t_arr, 0
        elif t_disp <= t_comp:
            t, ev = t_disp, 1
        else:
            t, ev = t_comp, 2
        if t == np.inf:
            break
        if t > cap_time:
            truncated = True
            t_last = cap_time
            break
        t_last = t

        if ev == 0:
            hn, a, j = _heap_pop(ht, hj, hs, hn)
            if decode[j] < 0.0:
                counts[j] += 1
                if counts[j] == k:
                    decode[j] = a
                    decoded += 1
                    if purge and remaining[j] > 0:
                        purged += remaining[j]
                        pool -= remaining[j]
                        remaining[j] = 0
            continue

        if ev == 1:
            remaining[next_disp] = ntasks
            pool += ntasks
            pool_t[next_disp] = t
            pool_n[next_disp] = pool
            next_disp += 1
            idle_lo, idle_hi = 0, num_workers
        else:
            jc = cur_job[pc]
            a = max(t, outlink[pc]) + d_out[pc]
            outlink[pc] = a
            hn = _heap_push(ht, hj, hs, hn, a, jc, seqc)
            seqc += 1
            cur_job[pc] = -1
            free[pc] = np.inf
            idle_lo, idle_hi = pc, pc + 1

        for p in range(idle_lo, idle_hi):
            if cur_job[p] >= 0:
                continue
            while jf < next_disp and remaining[jf] == 0:
                jf += 1
            if jf >= next_disp or remaining[jf] == 0:
                continue
            remaining[jf] -= 1
            pool -= 1
            draw = np.random.exponential(task_mean[p])
            free[p] = t + draw
            cur_job[p] = jf
            busy[p] += draw
            served_pw[p] += 1
            served_job[jf] += 1
            if collect:
                tr_job[tr_n] = jf
                tr_worker[tr_n] = p
                tr_start[tr_n] = t
                tr_finish[tr_n] = t + draw
                tr_n += 1

    return (decode, served_job, served_pw, busy, purged, pool, next_disp,
            t_last, truncated, pool_t, pool_n, tr_n)


def run_ideal(sc: Scenario, seed: int, collect_traces: bool = False) -> SimResult:
    if sc.reinforcement:
        raise ValueError("reinforcement applies to split policies, not ideal dispatch")
    if sc.rate_changes:
        raise ValueError("rate changes are not supported under the ideal policy")
    if sc.service_law != "exp":
        raise ValueError("ideal policy supports exponential task times only")

    ss = np.random.SeedSequence(seed)
    children = ss.spawn(3)
    arr_rng = np.random.default_rng(children[0])
    arrivals = np.cumsum(arr_rng.exponential(1.0 / sc.lam, sc.jobs))
    dispatch = arrivals + sc.t_enc
    ntasks = sc.num_tasks

    task_mean = np.array([w.task_mean for w in sc.workers])
    d_out = np.array([
        0.0 if math.isinf(w.comm_rate) else (sc.i_out / ntasks) / w.comm_rate
        for w in sc.workers
    ])
    cap_time = sc.horizon_cap_factor * (arrivals[-1] + sc.t_enc + sc.t_dec + 1.0 / sc.lam)
    kernel_seed = int(children[2].generate_state(1, np.uint32)[0])

    total = sc.jobs * ntasks
    if collect_traces:
        tr_job = np.empty(total, np.int64)
        tr_worker = np.empty(total, np.int64)
        tr_start = np.empty(total)
        tr_finish = np.empty(total)
    else:
        tr_job = np.empty(1, np.int64)
        tr_worker = np.empty(1, np.int64)
        tr_start = np.empty(1)
        tr_finish = np.empty(1)

    (decode, served_job, served_pw, busy, purged, pool_left, dispatched,
     t_last, truncated, pool_t, pool_n, tr_n) = _kernel(
        dispatch, ntasks, sc.k, task_mean, d_out, sc.purging, cap_time,
        kernel_seed, collect_traces, tr_job, tr_worker, tr_start, tr_finish,
    )

    completions = np.where(decode >= 0.0, decode + sc.t_dec, math.nan)
    decoded = int((decode >= 0.0).sum())
    horizon = cap_time if truncated else float(np.nanmax(completions))
    generated = dispatched * ntasks
    served = int(served_pw.sum())
    mean_delay, _, flag = in_order_delay(arrivals, completions)

    task_rows = None
    if collect_traces:
        task_rows = [
            (int(tr_job[i]), int(tr_worker[i]), float(dispatch[tr_job[i]]),
             float(tr_start[i]), float(tr_finish[i]), "done")
            for i in range(tr_n)
        ]

    metrics = SimMetrics(
        mean_in_order_delay=mean_delay,
        computational_load=served / (sc.k * (decoded if decoded else 1)),
        per_worker_utilization=[float(b) / horizon for b in busy],
        jobs_completed=decoded,
        jobs_total=sc.jobs,
        truncated=bool(truncated) or flag,
        tasks_generated=int(generated),
        tasks_served=served,
        tasks_purged=int(purged),
        tasks_residual=int(generated - served - purged),
        max_queue_length=int(pool_n[:dispatched].max()) if dispatched else 0,
        horizon_end=horizon,
    )
    return SimResult(
        metrics=metrics,
        arrivals=arrivals,
        completions=completions,
        deliveries=_deliveries(completions),
        tasks_used=served_job,
        queue_trace=[(float(pool_t[i]), (int(pool_n[i]),)) for i in range(dispatched)],
        task_rows=task_rows,
    )
