"""Polynomial-coded distributed matrix multiplication (PolyDot family).

A square matrix product C = A @ B is split into m = s*t blocks per input
matrix and encoded into evaluations of two matrix polynomials.  Each task
multiplies one evaluation pair; any K = t^2*(2s-1) distinct task results
recover C exactly by polynomial interpolation.

Correctness-critical paths run over exact integer/rational arithmetic
(Python ints and fractions inside object arrays); float payloads are
accepted but give only approximate decodes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class CodeParams:
    """Split geometry: A is cut into t x s blocks, B into s x t blocks.

    Note n does not have to tile evenly for load-planning purposes (the
    derived cost profile is well defined for any s, t >= 1); actual
    encode/decode additionally require s | n and t | n.
    """

    n: int
    s: int
    t: int

    def __post_init__(self) -> None:
        if self.n < 1 or self.s < 1 or self.t < 1:
            raise ValueError("n, s, t must be positive integers")

    @property
    def m(self) -> int:
        return self.s * self.t

    @property
    def k(self) -> int:
        """Recovery threshold: number of task results needed per job."""
        return self.t * self.t * (2 * self.s - 1)

    @property
    def tiles_evenly(self) -> bool:
        return self.n % self.s == 0 and self.n % self.t == 0

    def require_tiling(self) -> None:
        if not self.tiles_evenly:
            raise ValueError(
                f"matrix side {self.n} is not divisible by s={self.s} and t={self.t}"
            )


@dataclass(frozen=True)
class CodeProfile:
    """Per-job cost figures for one (s, t) choice at redundancy omega."""

    k: float                 # critical task count (int for integer s, t)
    i_in: float              # master -> worker symbols per job
    i_out: float             # worker -> fusion symbols per job
    i_out_purged: float      # i_out when redundant results are dropped
    c_ops: float             # operations per job
    t_enc_mean: float        # mean encoding time per job
    t_dec_mean: float        # mean decoding time per job
    s: float = 0.0
    t: float = 0.0
    omega: float = 1.0


@dataclass(frozen=True)
class TaskPayload:
    """One encoded task: both polynomial evaluations at a shared point."""

    eval_point: int
    a_eval: np.ndarray       # (n/t) x (n/s)
    b_eval: np.ndarray       # (n/s) x (n/t)


def enumerate_codes(m: int) -> list[tuple[int, int]]:
    """All (s, t) with s*t = m, ordered by ascending s."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return [(s, m // s) for s in range(1, m + 1) if m % s == 0]


def derive_profile_st(
    n: float, s: float, t: float, omega: float, mu_enc: float, mu_dec: float
) -> CodeProfile:
    """Cost profile for possibly non-integer split parameters.

    The sweep over every integer s in [1, m] uses t = m/s, which is
    fractional unless s divides m; all cost formulas extend smoothly.
    """
    if omega < 1.0:
        raise ValueError("redundancy ratio omega must be >= 1")
    if mu_enc <= 0.0 or mu_dec <= 0.0:
        raise ValueError("mu_enc and mu_dec must be positive")
    if s < 1 or t < 1:
        raise ValueError("s and t must be >= 1")
    k = t * t * (2.0 * s - 1.0)
    n2 = float(n) * float(n)
    i_in = 2.0 * k * omega * n2 / (s * t)
    i_out = k * omega * n2 / (t * t)
    c_ops = k * omega * n2 * n / (s * t * t)
    return CodeProfile(
        k=k,
        i_in=i_in,
        i_out=i_out,
        i_out_purged=k * n2 / (t * t),
        c_ops=c_ops,
        t_enc_mean=k * omega * n2 / mu_enc,
        t_dec_mean=(n2 * k + k**3) / mu_dec,
        s=float(s),
        t=float(t),
        omega=omega,
    )


def derive_profile(
    params: CodeParams, omega: float, mu_enc: float, mu_dec: float
) -> CodeProfile:
    return derive_profile_st(params.n, params.s, params.t, omega, mu_enc, mu_dec)


def _blocks(mat: np.ndarray, rows: int, cols: int) -> list[list[np.ndarray]]:
    br = mat.shape[0] // rows
    bc = mat.shape[1] // cols
    return [
        [mat[i * br : (i + 1) * br, j * bc : (j + 1) * bc] for j in range(cols)]
        for i in range(rows)
    ]


def _as_exact(mat: np.ndarray) -> np.ndarray:
    """Promote integer inputs to unbounded Python ints; leave floats alone."""
    arr = np.asarray(mat)
    if arr.dtype == object or np.issubdtype(arr.dtype, np.floating):
        return arr
    return arr.astype(object)


def encode_job(
    a: np.ndarray, b: np.ndarray, params: CodeParams, num_tasks: int
) -> list[TaskPayload]:
    """Encode one multiplication job into num_tasks evaluation payloads.

    Payload r carries P_A(x_r) and P_B(x_r) at x_r = r + 1, where
    P_A(x) = sum_{i,j} A_ij x^(t*j + i) over the t x s block grid of A and
    P_B(x) = sum_{k,l} B_kl x^(t*(2s-1)*l + t*(s-1-k)) over the s x t grid
    of B.
    """
    params.require_tiling()
    a = _as_exact(a)
    b = _as_exact(b)
    n, s, t = params.n, params.s, params.t
    if a.shape != (n, n) or b.shape != (n, n):
        raise ValueError(f"A and B must both be {n}x{n}")
    if num_tasks < params.k:
        raise ValueError(f"num_tasks={num_tasks} below recovery threshold {params.k}")

    a_blk = _blocks(a, t, s)
    b_blk = _blocks(b, s, t)
    payloads = []
    for r in range(num_tasks):
        x = r + 1
        a_eval = sum(
            a_blk[i][j] * x ** (t * j + i) for i in range(t) for j in range(s)
        )
        b_eval = sum(
            b_blk[k][l] * x ** (t * (2 * s - 1) * l + t * (s - 1 - k))
            for k in range(s)
            for l in range(t)
        )
        payloads.append(TaskPayload(eval_point=x, a_eval=a_eval, b_eval=b_eval))
    return payloads


def compute_task(payload: TaskPayload) -> np.ndarray:
    """Worker-side step: multiply the two evaluated blocks."""
    if payload.a_eval.shape[1] != payload.b_eval.shape[0]:
        raise ValueError("payload matrices are not conformable")
    return payload.a_eval @ payload.b_eval


@lru_cache(maxsize=256)
def _coeff_weights(
    xs: tuple[int, ...], exponents: tuple[int, ...]
) -> tuple[list[list[int]], int]:
    """Integer interpolation weights for the requested coefficients.

    coefficient(e) = sum_r w[e][r] * y_r / scale, with everything integral;
    keeping a single common denominator avoids per-term gcd normalisation.
    """
    basis = _lagrange_basis(xs)
    scale = math.lcm(*(denom for _, denom in basis))
    weights = [
        [num[e] * (scale // denom) for num, denom in basis] for e in exponents
    ]
    return weights, scale


@lru_cache(maxsize=64)
def _lagrange_basis(xs: tuple[int, ...]) -> list[tuple[list[int], int]]:
    """Per-point numerator polynomials and denominators for nodes xs.

    Returns, for each node x_r, the coefficients of prod_{q != r} (x - x_q)
    (ascending powers, exact ints) and the scalar prod_{q != r} (x_r - x_q).
    The interpolant is sum_r y_r * num_r(x) / denom_r.
    """
    k = len(xs)
    # master polynomial prod (x - x_q), ascending coefficients
    master = [1]
    for x in xs:
        master = [0] + master
        for i in range(len(master) - 1):
            master[i] -= master[i + 1] * x
    basis = []
    for x in xs:
        # synthetic division of master by (x - x_r)
        num = [0] * k
        num[k - 1] = master[k]
        for i in range(k - 2, -1, -1):
            num[i] = master[i + 1] + num[i + 1] * x
        denom = 0
        p = 1
        for c in num:
            denom += c * p
            p *= x
        basis.append((num, denom))
    return basis


def decode_job(
    results: list[tuple[int, np.ndarray]], params: CodeParams
) -> np.ndarray:
    """Rebuild C = A @ B from exactly K task results.

    Interpolates the degree-(K-1) matrix polynomial through the K points and
    reads block C_il off the coefficient of x^(t*(2s-1)*l + t*(s-1) + i) for
    i, l in {0, ..., t-1}.  Exact over integer results; raises if the decoded
    entries are not integral.
    """
    params.require_tiling()
    n, s, t = params.n, params.s, params.t
    k = params.k
    if len(results) != k:
        raise ValueError(f"need exactly {k} results, got {len(results)}")
    xs = tuple(int(x) for x, _ in results)
    if len(set(xs)) != k:
        raise ValueError("evaluation points must be distinct")
    ys = [_as_exact(mat) for _, mat in results]
    exact = all(mat.dtype == object for mat in ys)

    exps = tuple(
        t * (2 * s - 1) * l + t * (s - 1) + i for i in range(t) for l in range(t)
    )
    blk = n // t
    out = np.empty((n, n), dtype=object if exact else float)
    if exact:
        weights, scale = _coeff_weights(xs, exps)
        flat = [[mat[idx] for mat in ys] for idx in np.ndindex(blk, blk)]
        for pos, e in enumerate(exps):
            i, l = pos // t, pos % t
            w = weights[pos]
            block = np.empty((blk, blk), dtype=object)
            for where, idx in enumerate(np.ndindex(blk, blk)):
                num = sum(w[r] * flat[where][r] for r in range(k))
                q, rem = divmod(num, scale)
                if rem:
                    raise ValueError("decode did not land on integers; inconsistent results")
                block[idx] = q
            out[i * blk : (i + 1) * blk, l * blk : (l + 1) * blk] = block
    else:
        basis = _lagrange_basis(xs)
        for pos, e in enumerate(exps):
            i, l = pos // t, pos % t
            acc = sum(ys[r] * (basis[r][0][e] / basis[r][1]) for r in range(k))
            out[i * blk : (i + 1) * blk, l * blk : (l + 1) * blk] = acc
    return out


def poly_product_coeffs(
    a: np.ndarray, b: np.ndarray, params: CodeParams
) -> list[np.ndarray]:
    """Coefficients of P_A(x) @ P_B(x) by direct term-by-term convolution.

    Independent of the evaluation/interpolation path; used to cross-check
    encoding exponents and the degree bound.
    """
    params.require_tiling()
    a = _as_exact(a)
    b = _as_exact(b)
    n, s, t = params.n, params.s, params.t
    a_blk = _blocks(a, t, s)
    b_blk = _blocks(b, s, t)
    blk = n // t
    zero = np.zeros((blk, blk), dtype=object)
    # every product exponent lands in [0, k-1]; an IndexError here means
    # the exponent maps are wrong
    coeffs = [zero.copy() for _ in range(params.k)]
    for i in range(t):
        for j in range(s):
            for k_ in range(s):
                for l in range(t):
                    e = t * (2 * s - 1) * l + t * (s - 1 + j - k_) + i
                    coeffs[e] = coeffs[e] + a_blk[i][j] @ b_blk[k_][l]
    return coeffs


def validate_roundtrip(
    n: int, s: int, t: int, trials: int, seed: int, omega: float = 1.0
) -> tuple[int, int]:
    """Encode -> compute -> decode round trips on random integer matrices.

    Returns (passes, trials) where a pass is exact equality with A @ B.
    """
    params = CodeParams(n=n, s=s, t=t)
    params.require_tiling()
    rng = np.random.default_rng(seed)
    num_tasks = max(params.k, math.ceil(params.k * omega))
    passes = 0
    for _ in range(trials):
        a = rng.integers(-9, 10, size=(n, n))
        b = rng.integers(-9, 10, size=(n, n))
        payloads = encode_job(a, b, params, num_tasks)
        results = [(p.eval_point, compute_task(p)) for p in payloads[: params.k]]
        decoded = decode_job(results, params)
        if np.array_equal(decoded, _as_exact(a) @ _as_exact(b)):
            passes += 1
    return passes, trials
