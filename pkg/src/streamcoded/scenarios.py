"""Experiment orchestration: configs, worker pools, sweeps, CSV emission.

A single JSON config drives every entry point; each knob has a default
matching the reference heterogeneous-cluster studies.  All randomness
derives from (base_seed, scenario_id, purpose, indices) through SHA-256,
so re-running any command reproduces its outputs byte for byte, and runs
of different policies on the same replicate share one seed (paired
comparisons).
"""
from __future__ import annotations

import csv
import hashlib
import math
import json
import os
from dataclasses import dataclass, field, replace
from multiprocessing import get_context

import numpy as np

from .delay import (
    InfeasibleError,
    Plan,
    ScaledRates,
    WorkerCapability,
    execution_time_breakdown,
    is_valid_worker,
    optimal_split_rates,
    plan_search,
    select_workers,
)
from .polydot import CodeProfile, derive_profile_st, enumerate_codes, validate_roundtrip
from .sim import Scenario, SimResult, SimWorkerSpec, run_simulation


class ConfigError(ValueError):
    """Bad or inconsistent configuration input."""


_POLICIES = ("optimal", "ideal", "uniform")
_PURGE_MODES = ("off", "on", "both")
_SELECTIONS = ("op2", "rate_fill")
_S_MODES = ("all", "divisors")


@dataclass
class ScenarioConfig:
    scenario_id: str = "default"
    lam: float = 1e-3
    n: int = 100
    m: int = 50
    s: int | None = None
    t: int | None = None
    omega: float = 1.0
    omega_grid: list[float] = field(default_factory=lambda: [1.0, 1.2, 1.4, 1.7])
    theta: float = 2.0
    phi_lower: float = 1e-3
    pool_count: int = 150
    mu_range: tuple[float, float] = (0.0, 1000.0)
    c_range: tuple[float, float] = (0.0, 200.0)
    mu_enc: float = 1e4
    mu_dec: float = 1e5
    policies: list[str] = field(default_factory=lambda: ["optimal", "ideal", "uniform"])
    purge: str = "off"
    reinforce: bool = False
    theta_reinforce: float = 0.0
    alpha: float = 0.01
    beta: float = 0.01
    feedback_batch: int = 0
    resplit_period: int = 20
    replicates: int = 50
    jobs: int = 200
    base_seed: int = 0
    selection: str = "op2"
    s_mode: str = "all"
    service_law: str = "exp"
    parallel: int = 0

    _KEY_ALIASES = {"lambda": "lam"}

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__ if not f.startswith("_")}
        data = {}
        for key, value in raw.items():
            key = cls._KEY_ALIASES.get(key, key)
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            data[key] = value
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "ScenarioConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(raw)

    def validate(self) -> None:
        if self.lam <= 0:
            raise ConfigError("lambda must be positive")
        if self.n < 1 or self.m < 1:
            raise ConfigError("n and m must be positive")
        omegas = list(self.omega_grid) + [self.omega]
        if any(o < 1.0 for o in omegas):
            raise ConfigError("omega must be >= 1")
        if any(self.theta < o - 1.0 for o in omegas):
            raise ConfigError("theta must be >= omega - 1")
        if self.replicates < 1 or self.jobs < 1:
            raise ConfigError("replicates and jobs must be >= 1")
        for name, rng in (("mu_range", self.mu_range), ("c_range", self.c_range)):
            lo, hi = rng
            if lo < 0 or hi <= lo:
                raise ConfigError(f"{name} must satisfy 0 <= lo < hi")
        if self.mu_enc <= 0 or self.mu_dec <= 0:
            raise ConfigError("mu_enc and mu_dec must be positive")
        if self.purge not in _PURGE_MODES:
            raise ConfigError(f"purge must be one of {_PURGE_MODES}")
        if self.selection not in _SELECTIONS:
            raise ConfigError(f"selection must be one of {_SELECTIONS}")
        if self.s_mode not in _S_MODES:
            raise ConfigError(f"s_mode must be one of {_S_MODES}")
        for p in self.policies:
            if p not in _POLICIES:
                raise ConfigError(f"unknown policy {p!r}")
        if self.s is not None:
            if self.t is None and self.m % self.s != 0:
                raise ConfigError("t is required when s does not divide m")

    def code_st(self) -> tuple[int, int]:
        if self.s is None:
            raise ConfigError("config must set s (and t unless s divides m)")
        t = self.t if self.t is not None else self.m // self.s
        return int(self.s), int(t)


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from a tuple of identifiers."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little")


def generate_pool(
    count: int,
    mu_range: tuple[float, float],
    c_range: tuple[float, float],
    seed: int,
) -> list[WorkerCapability]:
    """Draw worker compute and link rates uniformly and independently."""
    if count < 1:
        raise ConfigError("pool count must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    mus = rng.uniform(mu_range[0], mu_range[1], count)
    cs = rng.uniform(c_range[0], c_range[1], count)
    return [WorkerCapability(mu, c) for mu, c in zip(mus, cs)]


def select_pool_subset(
    caps: list[WorkerCapability],
    cfg: ScenarioConfig,
    profile: CodeProfile,
) -> list[int]:
    """Pick the acquired worker set for one code choice.

    op2: valid workers by decreasing power until the rate target is met.
    rate_fill: pool order as drawn, no validity filter (heterogeneous
    cluster baseline), until the rate target is met.
    """
    target = 1.0 + cfg.theta
    if cfg.selection == "op2":
        usable = [i for i, c in enumerate(caps) if c.mu_tilde > 0]
        profiles = [caps[i].profile_for_code(profile) for i in usable]
        chosen = select_workers(profiles, cfg.lam, cfg.theta, profile.omega, profile)
        return [usable[i] for i in chosen]
    total = 0.0
    chosen = []
    for i, cap in enumerate(caps):
        if cap.mu_tilde <= 0:
            continue
        chosen.append(i)
        total += cap.mu_tilde / (cfg.lam * profile.c_ops)
        if total >= target:
            return chosen
    raise InfeasibleError(
        f"pool supplies total scaled rate {total:.4g} < {target:.4g}"
    )


def build_sim_scenario(
    cfg: ScenarioConfig,
    caps: list[WorkerCapability],
    profile: CodeProfile,
    policy: str,
    purging: bool,
    omega: float,
) -> Scenario:
    k = profile.k
    if abs(k - round(k)) > 1e-9:
        raise ConfigError("simulation requires integer recovery threshold; pick s, t with st = m")
    k = int(round(k))
    n_eff = k * omega
    workers = [
        SimWorkerSpec(
            task_mean=profile.c_ops / (n_eff * cap.mu_tilde),
            comm_rate=cap.comm_rate,
        )
        for cap in caps
    ]
    return Scenario(
        workers=workers,
        lam=cfg.lam,
        k=k,
        omega=omega,
        i_in=profile.i_in,
        i_out=profile.i_out,
        t_enc=profile.t_enc_mean,
        t_dec=profile.t_dec_mean,
        policy=policy,
        purging=purging,
        reinforcement=cfg.reinforce and policy != "ideal",
        theta_reinforce=cfg.theta_reinforce,
        alpha=cfg.alpha,
        beta=cfg.beta,
        phi_lower=cfg.phi_lower,
        resplit_period=cfg.resplit_period,
        feedback_batch=cfg.feedback_batch,
        jobs=cfg.jobs,
        service_law=cfg.service_law,
    )


# ------------------------------------------------------------------ sweeps

def _purge_values(cfg: ScenarioConfig) -> list[bool]:
    return {"off": [False], "on": [True], "both": [False, True]}[cfg.purge]


def _run_cell(args):
    key, scenario, seed = args
    metrics = run_simulation(scenario, seed).metrics
    return key, {
        "delay": metrics.mean_in_order_delay,
        "load": metrics.computational_load,
        "completed": metrics.jobs_completed,
        "truncated": metrics.truncated,
        "served": metrics.tasks_served,
    }


def _pool_map(fn, items, processes):
    if processes <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with get_context("fork").Pool(processes) as pool:
        return pool.map(fn, items, chunksize=1)


def sweep_omega(cfg: ScenarioConfig) -> tuple[list[dict], list[dict]]:
    """Delay/load trade-off grid over omega x policy x purge.

    Returns (summary rows, per-run rows).  Every run of one (omega,
    replicate) pair uses the same seed and pool across policies and purge
    settings, so policy comparisons are paired.
    """
    s, t = cfg.code_st()
    procs = cfg.parallel if cfg.parallel > 0 else (os.cpu_count() or 1)
    jobs_list = []
    cells = {}
    for oi, omega in enumerate(cfg.omega_grid):
        profile = derive_profile_st(cfg.n, s, t, omega, cfg.mu_enc, cfg.mu_dec)
        for rep in range(cfg.replicates):
            pool_seed = derive_seed(cfg.base_seed, cfg.scenario_id, "pool", oi, rep)
            run_seed = derive_seed(cfg.base_seed, cfg.scenario_id, "run", oi, rep)
            caps_all = generate_pool(cfg.pool_count, cfg.mu_range, cfg.c_range, pool_seed)
            try:
                subset = select_pool_subset(caps_all, cfg, profile)
            except InfeasibleError:
                for policy in cfg.policies:
                    for purge in _purge_values(cfg):
                        cells.setdefault((policy, purge, oi), []).append(None)
                continue
            caps = [caps_all[i] for i in subset]
            for policy in cfg.policies:
                for purge in _purge_values(cfg):
                    scenario = build_sim_scenario(cfg, caps, profile, policy, purge, omega)
                    key = (policy, purge, oi, rep)
                    jobs_list.append((key, scenario, run_seed))
    results = dict(_pool_map(_run_cell, jobs_list, procs))
    run_rows = []
    for (policy, purge, oi, rep), out in sorted(results.items()):
        run_rows.append({
            "scenario_id": cfg.scenario_id,
            "policy": policy,
            "purge": purge,
            "omega": cfg.omega_grid[oi],
            "replicate": rep,
            **out,
        })
    summary = []
    ref = 1.0 / ((1.0 + cfg.theta) * cfg.lam)
    for oi, omega in enumerate(cfg.omega_grid):
        for policy in cfg.policies:
            for purge in _purge_values(cfg):
                vals = [
                    results.get((policy, purge, oi, rep))
                    for rep in range(cfg.replicates)
                ]
                vals = [v for v in vals if v is not None]
                feasible = bool(vals)
                delays = np.array([v["delay"] for v in vals]) if vals else np.array([])
                loads = np.array([v["load"] for v in vals]) if vals else np.array([])
                row = {
                    "scenario_id": cfg.scenario_id,
                    "policy": policy,
                    "omega": omega,
                    "s": s,
                    "t": t,
                    "purge": purge,
                    "replicates": len(vals),
                    "jobs": cfg.jobs,
                    "feasible": feasible,
                    "mean_delay": delays.mean() if feasible else "",
                    "stderr_delay": (
                        delays.std(ddof=1) / math.sqrt(len(delays))
                        if len(delays) > 1 else ""
                    ),
                    "median_delay": np.median(delays) if feasible else "",
                    "iqr_delay": (
                        np.percentile(delays, 75) - np.percentile(delays, 25)
                        if feasible else ""
                    ),
                    "mean_load": loads.mean() if feasible else "",
                    "ref_delay_floor": ref,
                }
                summary.append(row)
    return summary, run_rows


def sweep_s(cfg: ScenarioConfig, replicate: int = 0) -> list[dict]:
    """Per-s diagnostics: validity bottlenecks, feasibility, predicted delay.

    One worker pool per replicate is shared across the whole s range.
    """
    pool_seed = derive_seed(cfg.base_seed, cfg.scenario_id, "pool_s", replicate)
    caps = generate_pool(cfg.pool_count, cfg.mu_range, cfg.c_range, pool_seed)
    if cfg.s_mode == "divisors":
        s_values = [s for s, _ in enumerate_codes(cfg.m)]
    else:
        s_values = list(range(1, cfg.m + 1))
    rows = []
    for s in s_values:
        t = cfg.m / s
        profile = derive_profile_st(cfg.n, s, t, cfg.omega, cfg.mu_enc, cfg.mu_dec)
        ok_enc = ok_in = ok_out = ok_dec = valid = 0
        for cap in caps:
            if cap.mu_tilde <= 0:
                continue
            w = cap.profile_for_code(profile)
            job_rate = 1.0 / w.mean_job_time
            c_enc = 1.0 / profile.t_enc_mean >= job_rate
            c_in = w.comm_rate / profile.i_in >= job_rate
            c_out = w.comm_rate / profile.i_out >= job_rate
            c_dec = 1.0 / profile.t_dec_mean >= job_rate
            ok_enc += c_enc
            ok_in += c_in
            ok_out += c_out
            ok_dec += c_dec
            valid += c_enc and c_in and c_out and c_dec
        row = {
            "scenario_id": cfg.scenario_id,
            "replicate": replicate,
            "s": s,
            "t": t,
            "k": profile.k,
            "ok_enc": ok_enc,
            "ok_in": ok_in,
            "ok_out": ok_out,
            "ok_dec": ok_dec,
            "valid": valid,
            "feasible": False,
            "selected": 0,
            "sum_r_comp": "",
            "d_exe": "",
            "d_comp": "",
            "d_comm_in": "",
            "d_comm_out": "",
            "t_enc": profile.t_enc_mean,
            "t_dec": profile.t_dec_mean,
        }
        try:
            subset = select_pool_subset(caps, cfg, profile)
        except InfeasibleError:
            rows.append(row)
            continue
        workers = [caps[i].profile_for_code(profile) for i in subset]
        rates = [ScaledRates.from_profile(w, cfg.lam, profile) for w in workers]
        try:
            split = optimal_split_rates(rates, cfg.phi_lower)
        except InfeasibleError:
            rows.append(row)
            continue
        breakdown = execution_time_breakdown(workers, split, cfg.lam, profile)
        row.update({
            "feasible": True,
            "selected": len(subset),
            "sum_r_comp": sum(r.r_comp for r in rates),
            "d_exe": sum(breakdown.values()),
            "d_comp": breakdown["d_comp"],
            "d_comm_in": breakdown["d_comm_in"],
            "d_comm_out": breakdown["d_comm_out"],
        })
        rows.append(row)
    return rows


def plan_report(cfg: ScenarioConfig) -> tuple[Plan, list[dict]]:
    """Run the full code-parameter search and return the chosen plan."""
    pool_seed = derive_seed(cfg.base_seed, cfg.scenario_id, "pool_plan")
    caps = generate_pool(cfg.pool_count, cfg.mu_range, cfg.c_range, pool_seed)
    codes = enumerate_codes(cfg.m)
    plan = plan_search(
        caps, cfg.lam, cfg.omega, cfg.theta, codes, cfg.n, cfg.mu_enc,
        cfg.mu_dec, cfg.phi_lower,
    )
    skipped = {(s, t): why for s, t, why in plan.skipped}
    rows = []
    for s, t in codes:
        chosen = (s, t) == (plan.s, plan.t)
        if (s, t) in skipped:
            rows.append({
                "scenario_id": cfg.scenario_id, "s": s, "t": t,
                "feasible": False, "chosen": False, "workers": 0,
                "d_exe": "", "reason": skipped[(s, t)],
            })
        else:
            profile = derive_profile_st(cfg.n, s, t, cfg.omega, cfg.mu_enc, cfg.mu_dec)
            usable = [i for i, c in enumerate(caps) if c.mu_tilde > 0]
            profiles = [caps[i].profile_for_code(profile) for i in usable]
            sel = select_workers(profiles, cfg.lam, cfg.theta, cfg.omega, profile)
            workers = [profiles[i] for i in sel]
            rates = [ScaledRates.from_profile(w, cfg.lam, profile) for w in workers]
            split = optimal_split_rates(rates, cfg.phi_lower)
            breakdown = execution_time_breakdown(workers, split, cfg.lam, profile)
            rows.append({
                "scenario_id": cfg.scenario_id, "s": s, "t": t,
                "feasible": True, "chosen": chosen, "workers": len(sel),
                "d_exe": sum(breakdown.values()), "reason": "",
            })
    return plan, rows


def format_plan(plan: Plan) -> str:
    lines = [
        f"chosen code: s={plan.s}, t={plan.t} (k={plan.profile.k:.0f})",
        f"predicted avg execution time: {plan.d_exe:.6g}",
        "breakdown: " + ", ".join(f"{k}={v:.6g}" for k, v in plan.breakdown.items()),
        f"workers ({len(plan.workers)}): {plan.workers}",
        "phi: " + ", ".join(f"{x:.6g}" for x in plan.split.phi),
        f"sum(phi) = {plan.split.phi.sum():.12f}, eta = {plan.split.eta:.6g}",
    ]
    if plan.skipped:
        lines.append("infeasible candidates: " + "; ".join(
            f"(s={s},t={t}) {why}" for s, t, why in plan.skipped
        ))
    return "\n".join(lines)


def simulate_once(cfg: ScenarioConfig) -> tuple[SimResult, list[dict]]:
    """One fully traced run of the first configured policy."""
    s, t = cfg.code_st()
    profile = derive_profile_st(cfg.n, s, t, cfg.omega, cfg.mu_enc, cfg.mu_dec)
    pool_seed = derive_seed(cfg.base_seed, cfg.scenario_id, "pool", 0, 0)
    run_seed = derive_seed(cfg.base_seed, cfg.scenario_id, "run", 0, 0)
    caps_all = generate_pool(cfg.pool_count, cfg.mu_range, cfg.c_range, pool_seed)
    subset = select_pool_subset(caps_all, cfg, profile)
    caps = [caps_all[i] for i in subset]
    policy = cfg.policies[0]
    purging = _purge_values(cfg)[0]
    scenario = build_sim_scenario(cfg, caps, profile, policy, purging, cfg.omega)
    result = run_simulation(scenario, run_seed, collect_traces=True)
    m = result.metrics
    summary = [{
        "scenario_id": cfg.scenario_id,
        "policy": policy,
        "omega": cfg.omega,
        "s": s,
        "t": t,
        "purge": purging,
        "replicates": 1,
        "jobs": cfg.jobs,
        "feasible": True,
        "mean_delay": m.mean_in_order_delay,
        "stderr_delay": "",
        "median_delay": m.mean_in_order_delay,
        "iqr_delay": "",
        "mean_load": m.computational_load,
        "ref_delay_floor": 1.0 / ((1.0 + cfg.theta) * cfg.lam),
    }]
    return result, summary


# ------------------------------------------------------------- CSV output

SUMMARY_HEADER = [
    "scenario_id", "policy", "omega", "s", "t", "purge", "replicates", "jobs",
    "feasible", "mean_delay", "stderr_delay", "median_delay", "iqr_delay",
    "mean_load", "ref_delay_floor",
]
SWEEP_HEADER = [
    "scenario_id", "replicate", "s", "t", "k", "ok_enc", "ok_in", "ok_out",
    "ok_dec", "valid", "feasible", "selected", "sum_r_comp", "d_exe",
    "d_comp", "d_comm_in", "d_comm_out", "t_enc", "t_dec",
]
PLAN_HEADER = [
    "scenario_id", "s", "t", "feasible", "chosen", "workers", "d_exe", "reason",
]
JOBS_HEADER = ["job", "arrival", "completion", "delivery", "tasks_used"]
TASKS_HEADER = ["job", "worker", "enqueue", "start", "finish", "status"]


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: str, header: list[str], rows: list[dict]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[col]) for col in header])


def job_rows(result: SimResult) -> list[dict]:
    rows = []
    for j in range(len(result.arrivals)):
        rows.append({
            "job": j,
            "arrival": float(result.arrivals[j]),
            "completion": float(result.completions[j]),
            "delivery": float(result.deliveries[j]),
            "tasks_used": int(result.tasks_used[j]),
        })
    return rows


def task_rows(result: SimResult) -> list[dict]:
    rows = []
    for job, worker, enq, start, finish, status in result.task_rows or ():
        rows.append({
            "job": int(job),
            "worker": int(worker),
            "enqueue": float(enq),
            "start": float(start),
            "finish": float(finish),
            "status": status,
        })
    rows.sort(key=lambda r: (r["job"], r["worker"], r["start"], r["enqueue"]))
    return rows
