"""M/G/1 delay model, worker selection, and optimal load-split solvers.

Each worker is an M/G/1 queue fed a thinned share of a Poisson job stream.
The mean response comes from the Pollaczek-Khinchin formula; splitting the
load to minimise the average job execution time is a strictly convex
problem whose closed-form KKT solution is parameterised by a single dual
variable found by bisection.  A waterfilling shortcut covers the
exponential-service, no-communication special case.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .polydot import CodeProfile

SPLIT_TOL = 1e-9          # |sum(phi) - 1| at the returned dual point
KKT_TOL = 1e-8            # certified residual of solver output
SATURATION_GAP = 1e-12    # enforced distance phi <= r_comp - gap
MAX_BISECT_ITERS = 200


class UnstableQueueError(ValueError):
    """Raised when a load fraction meets or exceeds a worker's service rate."""


class InfeasibleError(ValueError):
    """Raised when selection or splitting constraints cannot be met."""


class NoPlanError(InfeasibleError):
    """Raised when every candidate code parameter is infeasible."""

    def __init__(self, reasons: list[tuple[int, int, str]]):
        self.reasons = reasons
        lines = ", ".join(f"(s={s},t={t}): {why}" for s, t, why in reasons)
        super().__init__(f"no feasible plan; {lines}")


@dataclass(frozen=True)
class WorkerProfile:
    """First two moments of the full-job service time plus the link rate."""

    mean_job_time: float
    second_moment_job_time: float
    comm_rate: float = math.inf   # symbols per time unit; inf = unlimited

    def __post_init__(self) -> None:
        if not self.mean_job_time > 0:
            raise ValueError("mean_job_time must be positive")
        if self.second_moment_job_time < self.mean_job_time**2 * (1 - 1e-12):
            raise ValueError("second moment below squared mean")
        if self.comm_rate < 0:
            raise ValueError("comm_rate must be nonnegative")


@dataclass(frozen=True)
class WorkerCapability:
    """Raw per-worker capability: compute rate (ops/time) and link rate."""

    mu_tilde: float
    comm_rate: float = math.inf

    def profile_for_code(self, code: CodeProfile) -> WorkerProfile:
        """Job moments under exponential task times (Gamma job law).

        A job is k*omega i.i.d. exponential tasks, so the job time is Gamma
        with mean c_ops/mu and second moment (1 + 1/(k*omega)) * mean^2.
        """
        if self.mu_tilde <= 0:
            raise ValueError("mu_tilde must be positive")
        mean = code.c_ops / self.mu_tilde
        second = (1.0 + 1.0 / (code.k * code.omega)) * mean * mean
        return WorkerProfile(mean, second, self.comm_rate)


@dataclass(frozen=True)
class ScaledRates:
    """Per-worker rates normalised to jobs per mean inter-arrival time."""

    r_comp: float
    r_comm: float     # inf when communication is not a constraint
    a: float          # 0.5 * lambda * E[T^2] / E[T]

    @classmethod
    def from_profile(
        cls, w: WorkerProfile, lam: float, code: CodeProfile | None = None
    ) -> "ScaledRates":
        if lam <= 0:
            raise ValueError("arrival rate must be positive")
        r_comp = 1.0 / (lam * w.mean_job_time)
        if code is None or math.isinf(w.comm_rate):
            r_comm = math.inf
        else:
            r_comm = w.comm_rate / ((code.i_in + code.i_out) * lam)
        a = 0.5 * lam * w.second_moment_job_time / w.mean_job_time
        return cls(r_comp=r_comp, r_comm=r_comm, a=a)

    @property
    def inv_r_comm(self) -> float:
        return 0.0 if math.isinf(self.r_comm) else 1.0 / self.r_comm

    @property
    def xi(self) -> float:
        return 1.0 / self.r_comp + self.inv_r_comm - self.a


@dataclass
class LoadSplit:
    """Fraction of every job routed to each selected worker."""

    phi: np.ndarray
    eta: float = math.nan

    def __post_init__(self) -> None:
        self.phi = np.asarray(self.phi, dtype=float)


@dataclass
class Plan:
    """One planned operating point: code choice, workers, and split."""

    s: int
    t: int
    profile: CodeProfile
    workers: list[int]
    split: LoadSplit
    d_exe: float
    breakdown: dict[str, float]
    skipped: list[tuple[int, int, str]] = field(default_factory=list)


def per_worker_response_time(w: WorkerProfile, phi: float, lam: float) -> float:
    """Mean response (wait + service) of one worker fed arrival rate lam*phi."""
    rates = ScaledRates.from_profile(w, lam)
    if phi < 0:
        raise ValueError("phi must be nonnegative")
    if phi >= rates.r_comp:
        raise UnstableQueueError(
            f"phi={phi} >= r_comp={rates.r_comp}: queue is unstable"
        )
    return (rates.a * phi / (rates.r_comp - phi) + 1.0 / rates.r_comp) / lam


def execution_time_breakdown(
    workers: list[WorkerProfile],
    split: LoadSplit | np.ndarray,
    lam: float,
    code: CodeProfile,
) -> dict[str, float]:
    """Additive parts of the average job execution time.

    d_comp is the phi-weighted per-worker response averaged over the P
    parallel workers; communication is split into its master->worker and
    worker->fusion shares.
    """
    phi = split.phi if isinstance(split, LoadSplit) else np.asarray(split, float)
    if len(phi) != len(workers):
        raise ValueError("split length does not match worker count")
    p = len(workers)
    d_comp = 0.0
    d_in = 0.0
    d_out = 0.0
    for w, f in zip(workers, phi):
        rates = ScaledRates.from_profile(w, lam, code)
        if f >= rates.r_comp:
            raise UnstableQueueError(f"phi={f} >= r_comp={rates.r_comp}")
        d_comp += (rates.a * f * f / (rates.r_comp - f) + f / rates.r_comp) / lam
        if not math.isinf(w.comm_rate):
            d_in += f * code.i_in / w.comm_rate
            d_out += f * code.i_out / w.comm_rate
    return {
        "d_comp": d_comp / p,
        "d_comm_in": d_in / p,
        "d_comm_out": d_out / p,
        "t_enc": code.t_enc_mean,
        "t_dec": code.t_dec_mean,
    }


def avg_execution_time(
    workers: list[WorkerProfile],
    split: LoadSplit | np.ndarray,
    lam: float,
    code: CodeProfile,
) -> float:
    return sum(execution_time_breakdown(workers, split, lam, code).values())


def is_valid_worker(w: WorkerProfile, code: CodeProfile) -> bool:
    """True iff computation, not coding or transfer, is the bottleneck."""
    job_rate = 1.0 / w.mean_job_time
    others = min(
        1.0 / code.t_enc_mean,
        w.comm_rate / code.i_in,
        w.comm_rate / code.i_out,
        1.0 / code.t_dec_mean,
    )
    return others >= job_rate


def select_workers(
    pool: list[WorkerProfile],
    lam: float,
    theta: float,
    omega: float,
    code: CodeProfile,
) -> list[int]:
    """Shortest valid prefix, by decreasing job service rate, with
    cumulative scaled rate at least 1 + theta."""
    if theta < omega - 1.0:
        raise ValueError(f"theta={theta} must be >= omega-1={omega - 1.0}")
    order = sorted(range(len(pool)), key=lambda i: (pool[i].mean_job_time, i))
    selected: list[int] = []
    total = 0.0
    for i in order:
        if not is_valid_worker(pool[i], code):
            continue
        selected.append(i)
        total += ScaledRates.from_profile(pool[i], lam, code).r_comp
        if total >= 1.0 + theta:
            return selected
    raise InfeasibleError(
        f"valid workers supply total scaled rate {total:.4g} < 1+theta={1.0 + theta:.4g}"
    )


def phi_of_eta(rates: ScaledRates, eta: float, phi_lower: float) -> float:
    """Closed-form split fraction at dual value eta (non-decreasing in eta)."""
    if phi_lower >= rates.r_comp:
        raise InfeasibleError("phi_lower >= r_comp leaves no stable fraction")
    if eta <= rates.xi:
        return phi_lower
    val = rates.r_comp * (1.0 - math.sqrt(rates.a / (eta - rates.xi)))
    return max(val, phi_lower)


def split_objective(rates: list[ScaledRates], phi: np.ndarray) -> float:
    """Load-split cost: P * lambda * (d_comp + d_comm), constants dropped."""
    phi = np.asarray(phi, dtype=float)
    total = 0.0
    for r, f in zip(rates, phi):
        if f >= r.r_comp:
            return math.inf
        total += r.a * f * f / (r.r_comp - f) + (1.0 / r.r_comp + r.inv_r_comm) * f
    return float(total)


def _as_lower_vector(phi_lower, p: int) -> np.ndarray:
    arr = np.asarray(phi_lower, dtype=float)
    if arr.ndim == 0:
        arr = np.full(p, float(arr))
    if arr.shape != (p,):
        raise ValueError("phi_lower must be scalar or one value per worker")
    if np.any(arr < 0):
        raise ValueError("phi_lower must be nonnegative")
    return arr


def optimal_split_rates(
    rates: list[ScaledRates], phi_lower=1e-3
) -> LoadSplit:
    """Bisection on the dual variable until the fractions sum to one."""
    p = len(rates)
    lower = _as_lower_vector(phi_lower, p)
    r = np.array([x.r_comp for x in rates])
    if np.any(lower >= r):
        raise InfeasibleError("some phi_lower >= r_comp")
    if lower.sum() > 1.0 + SPLIT_TOL:
        raise InfeasibleError(f"sum(phi_lower)={lower.sum():.4g} > 1")
    if r.sum() <= 1.0:
        raise InfeasibleError(f"sum(r_comp)={r.sum():.4g} <= 1: system unstable")

    def total(eta: float) -> float:
        return sum(phi_of_eta(x, eta, lo) for x, lo in zip(rates, lower))

    lo = min(x.xi for x in rates)
    hi = max(
        x.a * x.r_comp**2 / (x.r_comp - l) ** 2 + x.xi
        for x, l in zip(rates, lower)
    )
    span = max(hi - lo, 1.0)
    while total(hi) < 1.0:
        hi += span
        span *= 2.0
    eta = hi
    for _ in range(MAX_BISECT_ITERS):
        eta = 0.5 * (lo + hi)
        s = total(eta)
        if abs(s - 1.0) <= SPLIT_TOL:
            break
        if s < 1.0:
            lo = eta
        else:
            hi = eta
    else:
        eta = hi  # upper bracket guarantees sum(phi) >= 1
        if abs(total(eta) - 1.0) > 100 * SPLIT_TOL:
            raise RuntimeError("dual bisection failed to converge")
    phi = np.array([phi_of_eta(x, eta, l) for x, l in zip(rates, lower)])
    phi = np.minimum(phi, r - SATURATION_GAP)
    return LoadSplit(phi=phi, eta=eta)


def optimal_split(
    workers: list[WorkerProfile],
    lam: float,
    phi_lower=1e-3,
    code: CodeProfile | None = None,
) -> LoadSplit:
    rates = [ScaledRates.from_profile(w, lam, code) for w in workers]
    return optimal_split_rates(rates, phi_lower)


def optimal_split_nocomm(
    workers: list[WorkerProfile], lam: float, phi_lower=1e-3
) -> LoadSplit:
    """Split with communication dropped from the objective."""
    rates = [
        ScaledRates(
            r_comp=x.r_comp, r_comm=math.inf, a=x.a
        )
        for x in (ScaledRates.from_profile(w, lam) for w in workers)
    ]
    return optimal_split_rates(rates, phi_lower)


def optimal_split_mm1_nocomm(
    r_comp: np.ndarray, phi_lower=1e-3
) -> LoadSplit:
    """Waterfilling for exponential service and free communication.

    Workers must come sorted by descending scaled rate; the first p* get
    the closed-form fraction and the rest stay at their floor, with p*
    fixed by the bracket condition on eta(p*).
    """
    r = np.asarray(r_comp, dtype=float)
    p = len(r)
    lower = _as_lower_vector(phi_lower, p)
    if np.any(r[:-1] < r[1:]):
        raise ValueError("workers must be sorted by descending r_comp")
    if np.any(lower >= r):
        raise InfeasibleError("some phi_lower >= r_comp")
    if lower.sum() > 1.0 + SPLIT_TOL or r.sum() <= 1.0:
        raise InfeasibleError("no feasible split")

    sqrt_r = np.sqrt(r)
    thresh = r / (r - lower) ** 2   # activation threshold per worker
    for p_star in range(1, p + 1):
        denom = r[:p_star].sum() + lower[p_star:].sum() - 1.0
        if denom <= 0:
            continue
        eta = (sqrt_r[:p_star].sum() / denom) ** 2
        if eta <= thresh[p_star - 1]:
            continue
        if p_star < p and eta > thresh[p_star]:
            continue
        phi = lower.copy()
        phi[:p_star] = r[:p_star] * (1.0 - np.sqrt(1.0 / (eta * r[:p_star])))
        phi = np.minimum(phi, r - SATURATION_GAP)
        return LoadSplit(phi=phi, eta=eta)
    raise InfeasibleError("no active-set size satisfies the eta bracket")


def kkt_residual(
    split: LoadSplit,
    rates: list[ScaledRates],
    phi_lower=1e-3,
) -> float:
    """Max violation of the stationarity/feasibility/slackness system.

    Multipliers are reconstructed from eta: the ceiling multipliers vanish
    (phi < r_comp is strict at any finite objective) and the floor
    multipliers are the clipped floor-gradient gap.
    """
    phi = np.asarray(split.phi, dtype=float)
    p = len(rates)
    lower = _as_lower_vector(phi_lower, p)
    r = np.array([x.r_comp for x in rates])
    a = np.array([x.a for x in rates])
    xi = np.array([x.xi for x in rates])

    grad = a * r**2 / (r - phi) ** 2 + xi
    eta = split.eta
    if not math.isfinite(eta):
        interior = phi > lower + 1e-12
        eta = float(np.mean(grad[interior])) if interior.any() else float(grad.max())
    grad_floor = a * r**2 / (r - lower) ** 2 + xi
    delta = np.maximum(grad_floor - eta, 0.0)

    stationarity = np.abs(grad - delta - eta)
    primal = max(
        abs(phi.sum() - 1.0),
        float(np.maximum(lower - phi, 0.0).max()),
        float(np.maximum(phi - r, 0.0).max()),
    )
    slackness = float(np.abs(delta * (phi - lower)).max())
    return max(float(stationarity.max()), primal, slackness)


def plan_search(
    pool: list[WorkerCapability],
    lam: float,
    omega: float,
    theta: float,
    codes: list[tuple[int, int]],
    n: int,
    mu_enc: float,
    mu_dec: float,
    phi_lower=1e-3,
) -> Plan:
    """Exhaustive search over code parameters for the minimum-delay plan."""
    if not codes:
        raise ValueError("empty code parameter set")
    from .polydot import derive_profile_st

    best: Plan | None = None
    skipped: list[tuple[int, int, str]] = []
    for s, t in codes:
        profile = derive_profile_st(n, s, t, omega, mu_enc, mu_dec)
        profiles = []
        for cap in pool:
            try:
                profiles.append(cap.profile_for_code(profile))
            except ValueError:
                profiles.append(None)
        usable = [w for w in profiles if w is not None]
        index_map = [i for i, w in enumerate(profiles) if w is not None]
        try:
            chosen = select_workers(usable, lam, theta, omega, profile)
            workers = [usable[i] for i in chosen]
            rates = [ScaledRates.from_profile(w, lam, profile) for w in workers]
            split = optimal_split_rates(rates, phi_lower)
            breakdown = execution_time_breakdown(workers, split, lam, profile)
            d_exe = sum(breakdown.values())
        except (InfeasibleError, UnstableQueueError) as exc:
            skipped.append((s, t, str(exc)))
            continue
        if best is None or d_exe < best.d_exe:
            best = Plan(
                s=s,
                t=t,
                profile=profile,
                workers=[index_map[i] for i in chosen],
                split=split,
                d_exe=d_exe,
                breakdown=breakdown,
            )
    if best is None:
        raise NoPlanError(skipped)
    best.skipped = skipped
    return best
