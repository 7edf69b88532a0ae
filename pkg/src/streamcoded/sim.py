"""Discrete-event simulation of the master / workers / fusion pipeline.

Jobs arrive as a Poisson stream at a master that encodes each one into
ceil(k*omega) tasks and places them on worker queues according to a split
policy.  Every worker is a FIFO server with serialized input and output
links; the fusion node counts task results and resolves a job at its k-th
arrival, after which results are released in job order.

Consecutive tasks of one job on one worker are drawn and scheduled as a
single vectorized batch (an exact rewrite of per-task stepping: in-batch
start/finish times follow the Lindley recursion against the affine input
link schedule).  `feedback_batch` caps the batch size when finer feedback
granularity matters.  A purge truncates the in-flight batch after the task
in service; input-link transfers already committed are not reclaimed.
"""
from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .delay import InfeasibleError, ScaledRates, optimal_split_rates
from .estimator import MomentEstimate

_DISPATCH, _BATCH_END, _DECODE = 0, 1, 2


@dataclass(frozen=True)
class SimWorkerSpec:
    """Per-worker simulation parameters (task granularity)."""

    task_mean: float              # mean service time of one task
    comm_rate: float = math.inf   # symbols per time unit, inf = free


@dataclass
class Scenario:
    """Everything one simulation run needs besides the seed."""

    workers: list[SimWorkerSpec]
    lam: float
    k: int                        # results needed to resolve a job
    omega: float = 1.0
    i_in: float = 0.0             # per-job symbols master -> worker
    i_out: float = 0.0            # per-job symbols worker -> fusion
    t_enc: float = 0.0
    t_dec: float = 0.0
    policy: object = "optimal"    # "optimal" | "uniform" | "ideal" | fractions
    purging: bool = False
    reinforcement: bool = False
    theta_reinforce: float = 0.0
    alpha: float = 0.01
    beta: float = 0.01
    phi_lower: float = 1e-3
    resplit_period: int = 20      # arrivals between re-splits; 0 = static
    feedback_batch: int = 0       # max tasks per service batch; 0 = no cap
    jobs: int = 200
    service_law: str = "exp"      # "exp" | "det" | "gamma"
    gamma_shape: float = 2.0
    rate_changes: tuple = ()      # (time, worker, rate_factor)
    horizon_cap_factor: float = 50.0

    @property
    def num_tasks(self) -> int:
        return int(math.ceil(self.k * self.omega - 1e-6))

    def task_variance(self, mean: float) -> float:
        if self.service_law == "exp":
            return mean * mean
        if self.service_law == "det":
            return 0.0
        if self.service_law == "gamma":
            return mean * mean / self.gamma_shape
        raise ValueError(f"unknown service law {self.service_law!r}")

    def declared_job_moments(self, spec: SimWorkerSpec) -> tuple[float, float]:
        n = self.num_tasks
        mean = n * spec.task_mean
        var = n * self.task_variance(spec.task_mean)
        return mean, var + mean * mean


@dataclass
class SimMetrics:
    mean_in_order_delay: float
    computational_load: float
    per_worker_utilization: list[float]
    jobs_completed: int
    jobs_total: int
    truncated: bool
    tasks_generated: int
    tasks_served: int
    tasks_purged: int
    tasks_residual: int
    max_queue_length: int
    horizon_end: float


@dataclass
class SimResult:
    metrics: SimMetrics
    arrivals: np.ndarray
    completions: np.ndarray       # nan where unresolved at horizon
    deliveries: np.ndarray        # nan outside the delivered prefix
    tasks_used: np.ndarray        # served task count per job
    queue_trace: list[tuple]      # (time, queued tasks per worker) at dispatches
    reinforcement_events: list[dict] = field(default_factory=list)
    task_rows: list[tuple] | None = None


def allocate_tasks_static(phi: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder apportionment of `total` tasks over fractions."""
    phi = np.asarray(phi, dtype=float)
    share = phi * total
    base = np.floor(share).astype(np.int64)
    deficit = total - int(base.sum())
    if deficit > 0:
        order = np.lexsort((np.arange(len(phi)), -(share - base)))
        base[order[:deficit]] += 1
    return base


def in_order_delay(
    arrivals: np.ndarray, completions: np.ndarray
) -> tuple[float, int, bool]:
    """Mean in-order delivery delay over the completed prefix.

    Delivery of job j waits for every earlier job; jobs after the first
    unresolved one are undeliverable, so the mean covers the prefix and the
    flag reports truncation.
    """
    completions = np.asarray(completions, dtype=float)
    bad = np.isnan(completions)
    prefix = int(np.argmax(bad)) if bad.any() else len(completions)
    if prefix == 0:
        return math.nan, 0, True
    deliveries = np.maximum.accumulate(completions[:prefix])
    delays = deliveries - np.asarray(arrivals, dtype=float)[:prefix]
    return float(delays.mean()), prefix, bool(bad.any())


def _deliveries(completions: np.ndarray) -> np.ndarray:
    out = np.full(len(completions), math.nan)
    bad = np.isnan(completions)
    prefix = int(np.argmax(bad)) if bad.any() else len(completions)
    if prefix:
        out[:prefix] = np.maximum.accumulate(completions[:prefix])
    return out


class _Batch:
    __slots__ = ("job", "draws", "starts", "finishes", "arrivals",
                 "prev_outlink", "batch_id", "enqueue_t")

    def __init__(self, job, draws, starts, finishes, arrivals, prev_outlink,
                 batch_id, enqueue_t):
        self.job = job
        self.draws = draws
        self.starts = starts
        self.finishes = finishes
        self.arrivals = arrivals
        self.prev_outlink = prev_outlink
        self.batch_id = batch_id
        self.enqueue_t = enqueue_t


class _Worker:
    __slots__ = ("idx", "task_mean", "d_in", "d_out", "queue", "cur",
                 "cpu_free", "inlink_free", "outlink_free", "busy_time",
                 "served", "est", "mean_scale", "pending_changes",
                 "outstanding")

    def __init__(self, idx, task_mean, d_in, d_out, est, changes):
        self.idx = idx
        self.task_mean = task_mean
        self.d_in = d_in
        self.d_out = d_out
        self.queue = deque()          # [job, n, avail0, enqueue_t]
        self.cur: _Batch | None = None
        self.cpu_free = 0.0
        self.inlink_free = 0.0
        self.outlink_free = 0.0
        self.busy_time = 0.0
        self.served = 0
        self.est = est
        self.mean_scale = 1.0
        self.pending_changes = changes  # sorted [(time, factor)]
        self.outstanding: dict[int, int] = {}

    def queued_tasks(self, now: float) -> int:
        n = sum(g[1] for g in self.queue)
        if self.cur is not None:
            n += len(self.cur.starts) - int(
                np.searchsorted(self.cur.starts, now, side="right")
            )
        return n


class _Job:
    __slots__ = ("id", "arrival", "dispatch", "generated", "served", "purged",
                 "arrays", "total", "decode_time", "completion",
                 "decode_version", "decode_scheduled", "phi_snap", "e_disp",
                 "mu_fb")

    def __init__(self, jid, arrival, dispatch):
        self.id = jid
        self.arrival = arrival
        self.dispatch = dispatch
        self.generated = 0
        self.served = 0
        self.purged = 0
        self.arrays: list[np.ndarray] = []
        self.total = 0
        self.decode_time = None
        self.completion = math.nan
        self.decode_version = 0
        self.decode_scheduled = None
        self.phi_snap = None
        self.e_disp = None
        self.mu_fb = 0.0


def _draw_service(rng, law, gamma_shape, mean, n):
    if law == "exp":
        return rng.exponential(mean, n)
    if law == "det":
        return np.full(n, mean)
    if law == "gamma":
        return rng.gamma(gamma_shape, mean / gamma_shape, n)
    raise ValueError(f"unknown service law {law!r}")


def run_simulation(scenario: Scenario, seed: int, collect_traces: bool = False) -> SimResult:
    """One deterministic seeded run; identical inputs give identical output."""
    if isinstance(scenario.policy, str) and scenario.policy == "ideal":
        from .ideal import run_ideal

        return run_ideal(scenario, seed, collect_traces)
    return _run_split_policy(scenario, seed, collect_traces)


def _initial_phi(sc: Scenario) -> np.ndarray:
    p = len(sc.workers)
    if isinstance(sc.policy, str):
        if sc.policy == "uniform":
            return np.full(p, 1.0 / p)
        if sc.policy == "optimal":
            rates = []
            for spec in sc.workers:
                mean, second = sc.declared_job_moments(spec)
                rates.append(_scaled_rates(sc, spec, mean, second))
            return optimal_split_rates(rates, sc.phi_lower).phi
        raise ValueError(f"unknown policy {sc.policy!r}")
    phi = np.asarray(sc.policy, dtype=float)
    if phi.shape != (p,) or abs(phi.sum() - 1.0) > 1e-9:
        raise ValueError("explicit split must have one fraction per worker, summing to 1")
    return phi


def _scaled_rates(sc: Scenario, spec: SimWorkerSpec, mean, second) -> ScaledRates:
    if math.isinf(spec.comm_rate) or sc.i_in + sc.i_out == 0.0:
        r_comm = math.inf
    else:
        r_comm = spec.comm_rate / ((sc.i_in + sc.i_out) * sc.lam)
    return ScaledRates(
        r_comp=1.0 / (sc.lam * mean),
        r_comm=r_comm,
        a=0.5 * sc.lam * second / mean,
    )


def _run_split_policy(sc: Scenario, seed: int, collect_traces: bool) -> SimResult:
    ss = np.random.SeedSequence(seed)
    arr_rng, svc_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    num_jobs = sc.jobs
    arrivals = np.cumsum(arr_rng.exponential(1.0 / sc.lam, num_jobs))
    ntasks = sc.num_tasks
    P = len(sc.workers)

    changes: list[list[tuple[float, float]]] = [[] for _ in range(P)]
    for t_chg, widx, factor in sorted(sc.rate_changes):
        changes[widx].append((t_chg, factor))
    workers = []
    for idx, spec in enumerate(sc.workers):
        d_in = 0.0 if math.isinf(spec.comm_rate) else (sc.i_in / ntasks) / spec.comm_rate
        d_out = 0.0 if math.isinf(spec.comm_rate) else (sc.i_out / ntasks) / spec.comm_rate
        mean, second = sc.declared_job_moments(spec)
        est = MomentEstimate.from_job_moments(
            mean, second, ntasks, 1.0, alpha=sc.alpha, beta=sc.beta
        )
        workers.append(_Worker(idx, spec.task_mean, d_in, d_out, est, changes[idx]))

    phi = _initial_phi(sc)
    adaptive = isinstance(sc.policy, str) and sc.policy == "optimal" and sc.resplit_period > 0
    jobs = [_Job(j, arrivals[j], arrivals[j] + sc.t_enc) for j in range(num_jobs)]
    open_jobs: list[_Job] = []

    heap: list[tuple] = []
    seq = 0
    batch_counter = 0
    cap_time = sc.horizon_cap_factor * (arrivals[-1] + sc.t_enc + sc.t_dec + 1.0 / sc.lam)
    decoded = 0
    purged_total = 0
    truncated = False
    queue_trace: list[tuple] = []
    reinforcement_events: list[dict] = []
    task_rows: list[tuple] | None = [] if collect_traces else None

    def push(t, kind, a, b):
        nonlocal seq
        heapq.heappush(heap, (t, seq, kind, a, b))
        seq += 1

    for job in jobs:
        push(job.dispatch, _DISPATCH, job.id, 0)

    def current_estimate(w: _Worker) -> float:
        return w.est.job_moments(ntasks, 1.0)[0]

    def try_resplit():
        nonlocal phi
        rates = []
        for w, spec in zip(workers, sc.workers):
            mean, second = w.est.job_moments(ntasks, 1.0)
            if mean <= 0:
                return
            rates.append(_scaled_rates(sc, spec, mean, second))
        try:
            phi = optimal_split_rates(rates, sc.phi_lower).phi
        except InfeasibleError:
            pass  # keep previous split until estimates admit a stable one

    def enqueue(w: _Worker, jid: int, n: int, now: float, front: bool = False):
        avail0 = max(w.inlink_free, now)
        w.inlink_free = avail0 + n * w.d_in
        cap = sc.feedback_batch if sc.feedback_batch > 0 else n
        groups = []
        done = 0
        while done < n:
            size = min(cap, n - done)
            groups.append([jid, size, avail0 + done * w.d_in, now])
            done += size
        if front:
            for g in reversed(groups):
                w.queue.appendleft(g)
        else:
            w.queue.extend(groups)
        w.outstanding[jid] = w.outstanding.get(jid, 0) + n

    def register_arrivals(job: _Job, arr: np.ndarray):
        job.arrays.append(arr)
        job.total += len(arr)
        if job.decode_time is None and job.total >= sc.k:
            tau = np.partition(np.concatenate(job.arrays), sc.k - 1)[sc.k - 1]
            if job.decode_scheduled is None or tau < job.decode_scheduled:
                job.decode_version += 1
                job.decode_scheduled = tau
                push(tau, _DECODE, job.id, job.decode_version)

    def try_start(w: _Worker, now: float):
        nonlocal batch_counter
        if w.cur is not None or not w.queue:
            return
        jid, n, avail0, enq_t = w.queue.popleft()
        while w.pending_changes and w.pending_changes[0][0] <= now:
            w.mean_scale /= w.pending_changes.pop(0)[1]
        draws = _draw_service(
            svc_rng, sc.service_law, sc.gamma_shape, w.task_mean * w.mean_scale, n
        )
        s_cum = np.cumsum(draws)
        pre = s_cum - draws
        m_run = np.maximum.accumulate(np.arange(n) * w.d_in - pre)
        finishes = s_cum + np.maximum(w.cpu_free, (avail0 + w.d_in) + m_run)
        starts = finishes - draws
        g_run = np.maximum.accumulate(finishes - np.arange(n) * w.d_out)
        arrv = (np.arange(n) + 1.0) * w.d_out + np.maximum(g_run, w.outlink_free)
        batch_counter += 1
        w.cur = _Batch(jid, draws, starts, finishes, arrv,
                       w.outlink_free, batch_counter, enq_t)
        w.cpu_free = finishes[-1]
        w.outlink_free = arrv[-1]
        push(finishes[-1], _BATCH_END, w.idx, batch_counter)
        register_arrivals(jobs[jid], arrv)

    def reinforcement_step(now: float):
        for job in list(open_jobs):
            holders = [w for w in workers if w.outstanding.get(job.id, 0) > 0]
            if not holders:
                continue
            a_j = sum(
                int(np.searchsorted(arr, now, side="right")) for arr in job.arrays
            )
            mu_e = float(np.mean([job.phi_snap[w.idx] / job.e_disp[w.idx] for w in holders]))
            e_now = [current_estimate(w) for w in workers]
            mu_r = float(np.mean([job.phi_snap[w.idx] / e_now[w.idx] for w in holders]))
            mu_delta = mu_e + job.mu_fb - mu_r
            if mu_delta <= sc.theta_reinforce:
                continue
            candidates = [
                w for w in workers
                if not any(j2 <= job.id for j2 in w.outstanding)
            ]
            candidates.sort(key=lambda w: (e_now[w.idx], w.idx))
            chosen = []
            mu_n = 0.0
            for w in candidates:
                rate = 1.0 / e_now[w.idx]
                if mu_n + rate <= mu_delta:
                    chosen.append(w)
                    mu_n += rate
            if not chosen:
                continue
            m_j = max((sc.k * (sc.omega - 1.0) - a_j) * mu_n, 0.0)
            budget = max(sc.k - a_j, 0)
            assigned = {}
            for w in chosen:
                n_w = math.ceil(m_j / (mu_n * e_now[w.idx])) if m_j > 0 else 0
                n_w = min(n_w, budget - sum(assigned.values()))
                if n_w > 0:
                    assigned[w.idx] = n_w
                    enqueue(w, job.id, n_w, now, front=True)
                    job.generated += n_w
            job.mu_fb += mu_n
            reinforcement_events.append({
                "time": now,
                "job": job.id,
                "workers": [w.idx for w in chosen],
                "assigned": assigned,
                "mu_delta": mu_delta,
                "mu_n": mu_n,
            })
            for w in chosen:
                try_start(w, now)

    def finish_batch(w: _Worker, now: float):
        b = w.cur
        n = len(b.draws)
        w.served += n
        w.busy_time += float(b.draws.sum())
        jobs[b.job].served += n
        w.est.update_block_fast(b.draws)
        left = w.outstanding.get(b.job, 0) - n
        if left > 0:
            w.outstanding[b.job] = left
        else:
            w.outstanding.pop(b.job, None)
        if task_rows is not None:
            for i in range(n):
                task_rows.append(
                    (b.job, w.idx, b.enqueue_t, b.starts[i], b.finishes[i], "done")
                )
        w.cur = None
        try_start(w, now)
        if sc.reinforcement:
            reinforcement_step(now)

    def purge_job(job: _Job, now: float):
        nonlocal purged_total, batch_counter
        for w in workers:
            if job.id in w.outstanding:
                kept = deque()
                for g in w.queue:
                    if g[0] == job.id:
                        purged_total += g[1]
                        job.purged += g[1]
                        if task_rows is not None:
                            for _ in range(g[1]):
                                task_rows.append(
                                    (job.id, w.idx, g[3], math.nan, math.nan, "purged")
                                )
                    else:
                        kept.append(g)
                w.queue = kept
            b = w.cur
            if b is not None and b.job == job.id:
                n = len(b.draws)
                n_keep = int(np.searchsorted(b.starts, now, side="left"))
                if n_keep < n:
                    purged_total += n - n_keep
                    job.purged += n - n_keep
                    if task_rows is not None:
                        for _ in range(n - n_keep):
                            task_rows.append(
                                (job.id, w.idx, b.enqueue_t, math.nan, math.nan, "purged")
                            )
                    if n_keep == 0:
                        w.cpu_free = now
                        w.outlink_free = b.prev_outlink
                        w.cur = None
                        try_start(w, now)
                    else:
                        b.draws = b.draws[:n_keep]
                        b.starts = b.starts[:n_keep]
                        b.finishes = b.finishes[:n_keep]
                        b.arrivals = b.arrivals[:n_keep]
                        w.cpu_free = b.finishes[-1]
                        w.outlink_free = b.arrivals[-1]
                        batch_counter += 1
                        b.batch_id = batch_counter
                        push(w.cpu_free, _BATCH_END, w.idx, batch_counter)
            w.outstanding.pop(job.id, None)

    now = 0.0
    while heap and decoded < num_jobs:
        t, _, kind, a, b = heapq.heappop(heap)
        if t > cap_time:
            truncated = True
            now = cap_time
            break
        now = t
        if kind == _DISPATCH:
            job = jobs[a]
            if adaptive and a > 0 and a % sc.resplit_period == 0:
                try_resplit()
            counts = allocate_tasks_static(phi, ntasks)
            job.phi_snap = phi.copy()
            job.e_disp = np.array([current_estimate(w) for w in workers])
            job.generated = int(counts.sum())
            for w, n in zip(workers, counts):
                if n > 0:
                    enqueue(w, a, int(n), t)
            open_jobs.append(job)
            queue_trace.append((t, tuple(w.queued_tasks(t) for w in workers)))
            for w, n in zip(workers, counts):
                if n > 0:
                    try_start(w, t)
        elif kind == _BATCH_END:
            w = workers[a]
            if w.cur is not None and w.cur.batch_id == b:
                finish_batch(w, t)
        else:  # _DECODE
            job = jobs[a]
            if job.decode_time is not None or job.decode_version != b:
                continue
            job.decode_time = t
            job.completion = t + sc.t_dec
            decoded += 1
            open_jobs.remove(job)
            if sc.purging:
                purge_job(job, t)

    completions = np.array([j.completion for j in jobs])
    horizon = cap_time if truncated else float(np.nanmax(completions))

    # started tasks in flight at the horizon count as executed work
    for w in workers:
        if w.cur is not None:
            n_started = int(np.searchsorted(w.cur.starts, horizon, side="left"))
            if n_started > 0:
                w.served += n_started
                w.busy_time += float(w.cur.draws[:n_started].sum())
                jobs[w.cur.job].served += n_started
                if task_rows is not None:
                    for i in range(n_started):
                        task_rows.append(
                            (w.cur.job, w.idx, w.cur.enqueue_t,
                             w.cur.starts[i], w.cur.finishes[i], "done")
                        )

    generated = sum(j.generated for j in jobs)
    served = sum(w.served for w in workers)
    mean_delay, delivered, flag = in_order_delay(arrivals, completions)
    load_base = sc.k * (decoded if decoded else 1)
    metrics = SimMetrics(
        mean_in_order_delay=mean_delay,
        computational_load=served / load_base,
        per_worker_utilization=[w.busy_time / horizon for w in workers],
        jobs_completed=decoded,
        jobs_total=num_jobs,
        truncated=truncated or flag,
        tasks_generated=generated,
        tasks_served=served,
        tasks_purged=purged_total,
        tasks_residual=generated - served - purged_total,
        max_queue_length=max((max(q[1]) for q in queue_trace), default=0),
        horizon_end=horizon,
    )
    return SimResult(
        metrics=metrics,
        arrivals=arrivals,
        completions=completions,
        deliveries=_deliveries(completions),
        tasks_used=np.array([j.served for j in jobs]),
        queue_trace=queue_trace,
        reinforcement_events=reinforcement_events,
        task_rows=task_rows,
    )
