"""Feedback-driven tracking of per-worker task service-time moments.

Exponentially weighted running estimates of the first and second moments
of observed task times, plus the conversion between task-level and
job-level moments when a job is a fixed number of i.i.d. tasks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MomentEstimate:
    """EWMA estimates of a worker's task-time moments."""

    mean: float = 0.0
    second_moment: float = 0.0
    alpha: float = 0.01
    beta: float = 0.01
    sample_count: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha <= 1.0 and 0.0 < self.beta <= 1.0):
            raise ValueError("forgetting factors must lie in (0, 1]")
        if self.mean < 0.0 or self.second_moment < 0.0:
            raise ValueError("moment estimates must be nonnegative")

    def update(self, u: float) -> "MomentEstimate":
        """Fold in one observed task time."""
        if u < 0.0:
            raise ValueError("task times cannot be negative")
        self.mean = (1.0 - self.alpha) * self.mean + self.alpha * u
        self.second_moment = (1.0 - self.beta) * self.second_moment + self.beta * u * u
        self.sample_count += 1
        return self

    def update_block(self, samples, paper_literal: bool = False) -> "MomentEstimate":
        """Fold in a chronologically ordered block of observations.

        The default is exactly equivalent to sequential update() calls.  The
        alternative weighting (1-a)^(L-i) * a^i keeps the block-update form
        some derivations use; it does not match the sequential recursion for
        L > 1 and is provided for comparison only.
        """
        samples = list(samples)
        if not samples:
            return self
        if any(u < 0.0 for u in samples):
            raise ValueError("task times cannot be negative")
        if not paper_literal:
            for u in samples:
                self.update(u)
            return self
        big_l = len(samples)
        e_sum = 0.0
        s_sum = 0.0
        for i in range(1, big_l + 1):
            u = samples[big_l - i]
            e_sum += (1.0 - self.alpha) ** (big_l - i) * self.alpha**i * u
            s_sum += (1.0 - self.beta) ** (big_l - i) * self.beta**i * u * u
        self.mean = (1.0 - self.alpha) ** big_l * self.mean + e_sum
        self.second_moment = (1.0 - self.beta) ** big_l * self.second_moment + s_sum
        self.sample_count += big_l
        return self

    def update_block_fast(self, samples: np.ndarray) -> "MomentEstimate":
        """Closed-form evaluation of the sequential recursion over a block.

        Identical up to float rounding to folding update() sample by sample,
        at vector speed; the simulator's hot path uses this.
        """
        u = np.asarray(samples, dtype=float)
        n = len(u)
        if n == 0:
            return self
        if np.any(u < 0.0):
            raise ValueError("task times cannot be negative")
        decay_a = np.power(1.0 - self.alpha, np.arange(n - 1, -1, -1, dtype=float))
        decay_b = (
            decay_a
            if self.beta == self.alpha
            else np.power(1.0 - self.beta, np.arange(n - 1, -1, -1, dtype=float))
        )
        self.mean = (1.0 - self.alpha) ** n * self.mean + self.alpha * float(
            decay_a @ u
        )
        self.second_moment = (1.0 - self.beta) ** n * self.second_moment + (
            self.beta * float(decay_b @ (u * u))
        )
        self.sample_count += n
        return self

    def job_moments(self, k: float, omega: float) -> tuple[float, float]:
        """Job-level (E[T], E[T^2]) when a job is k*omega i.i.d. tasks.

        The sum of n i.i.d. tasks has mean n*E[U] and second moment
        n*Var[U] + (n*E[U])^2; the variance estimate is clipped at zero to
        absorb EWMA noise.
        """
        n = k * omega
        if n < 1.0:
            raise ValueError("k * omega must be at least 1")
        var = max(self.second_moment - self.mean * self.mean, 0.0)
        mean_job = n * self.mean
        return mean_job, n * var + mean_job * mean_job

    @classmethod
    def from_job_moments(
        cls,
        mean_job: float,
        second_job: float,
        k: float,
        omega: float,
        alpha: float = 0.01,
        beta: float = 0.01,
    ) -> "MomentEstimate":
        """Seed the estimator from declared job-level moments."""
        n = k * omega
        mean = mean_job / n
        var_task = max(second_job - mean_job * mean_job, 0.0) / n
        return cls(
            mean=mean,
            second_moment=var_task + mean * mean,
            alpha=alpha,
            beta=beta,
            sample_count=0,
        )
