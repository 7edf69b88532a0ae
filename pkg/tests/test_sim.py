import math

import numpy as np
import pytest
from scipy import stats

from streamcoded.delay import WorkerProfile, per_worker_response_time
from streamcoded.sim import (
    Scenario,
    SimWorkerSpec,
    allocate_tasks_static,
    in_order_delay,
    run_simulation,
)


def batch_mean_se(x, batches=50):
    x = np.asarray(x)
    n = (len(x) // batches) * batches
    means = x[:n].reshape(batches, -1).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(batches))


def single_worker_scenario(jobs, lam, k, task_mean, law="exp", **kw):
    return Scenario(
        workers=[SimWorkerSpec(task_mean=task_mean)],
        lam=lam,
        k=k,
        omega=1.0,
        policy=np.array([1.0]),
        resplit_period=0,
        jobs=jobs,
        service_law=law,
        **kw,
    )


class TestAllocate:
    def test_even_split(self):
        assert allocate_tasks_static(np.array([0.5, 0.5]), 10).tolist() == [5, 5]

    def test_largest_remainder_tie_break(self):
        got = allocate_tasks_static(np.array([1 / 3, 1 / 3, 1 / 3]), 10)
        assert got.tolist() == [4, 3, 3]

    def test_sum_invariant(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = rng.integers(1, 9)
            phi = rng.dirichlet(np.ones(p))
            total = int(rng.integers(1, 500))
            assert allocate_tasks_static(phi, total).sum() == total


class TestInOrderDelay:
    def test_in_order_completions(self):
        mean, n, flag = in_order_delay([0.0, 1.0, 2.0], [3.0, 4.0, 5.0])
        assert (mean, n, flag) == (3.0, 3, False)

    def test_head_of_line_blocking(self):
        mean, n, flag = in_order_delay([0.0, 1.0, 2.0], [5.0, 3.0, 9.0])
        assert mean == pytest.approx(16.0 / 3.0)
        assert not flag

    def test_incomplete_prefix(self):
        mean, n, flag = in_order_delay([0.0, 1.0, 2.0], [5.0, math.nan, 9.0])
        assert (n, flag) == (1, True)
        assert mean == pytest.approx(5.0)


class TestQueueFidelity:
    def test_empty_system_reduction(self):
        sc = single_worker_scenario(2000, lam=1e-5, k=1, task_mean=1.0,
                                    t_enc=0.25, t_dec=0.5)
        res = run_simulation(sc, seed=1)
        responses = res.completions - res.arrivals
        assert responses.mean() == pytest.approx(0.25 + 1.0 + 0.5, rel=0.05)

    def test_mm1_response(self):
        sc = single_worker_scenario(40000, lam=0.7, k=1, task_mean=1.0)
        res = run_simulation(sc, seed=2)
        responses = res.completions - res.arrivals
        want = per_worker_response_time(WorkerProfile(1.0, 2.0), 1.0, 0.7)
        assert want == pytest.approx(1.0 / 0.3)
        se = batch_mean_se(responses)
        assert abs(responses.mean() - want) < 3 * se

    def test_md1_response(self):
        sc = single_worker_scenario(40000, lam=0.7, k=1, task_mean=1.0, law="det")
        res = run_simulation(sc, seed=3)
        responses = res.completions - res.arrivals
        want = per_worker_response_time(WorkerProfile(1.0, 1.0), 1.0, 0.7)
        assert want == pytest.approx(1.0 + 0.7 / 0.6)
        se = batch_mean_se(responses)
        assert abs(responses.mean() - want) < 3 * se

    def test_mgamma1_response(self):
        # job = 5 exponential tasks -> Gamma(5) job service
        sc = single_worker_scenario(30000, lam=0.7, k=5, task_mean=0.2)
        res = run_simulation(sc, seed=4)
        responses = res.completions - res.arrivals
        want = per_worker_response_time(WorkerProfile(1.0, 1.2), 1.0, 0.7)
        se = batch_mean_se(responses)
        assert abs(responses.mean() - want) < 3 * se


class TestDeterminismAndConservation:
    def scenario(self, purging):
        return Scenario(
            workers=[SimWorkerSpec(0.1, comm_rate=50.0), SimWorkerSpec(0.15, comm_rate=80.0)],
            lam=0.5,
            k=8,
            omega=1.5,
            i_in=4.0,
            i_out=2.0,
            t_enc=0.01,
            t_dec=0.02,
            policy="optimal",
            purging=purging,
            jobs=300,
        )

    def test_bit_identical_reruns(self):
        for purging in (False, True):
            a = run_simulation(self.scenario(purging), seed=5)
            b = run_simulation(self.scenario(purging), seed=5)
            assert np.array_equal(a.completions, b.completions)
            assert np.array_equal(a.tasks_used, b.tasks_used)
            assert a.queue_trace == b.queue_trace
            assert a.metrics == b.metrics

    def test_conservation(self):
        for purging in (False, True):
            m = run_simulation(self.scenario(purging), seed=6).metrics
            assert m.tasks_generated == (
                m.tasks_served + m.tasks_purged + m.tasks_residual
            )
            assert m.tasks_residual >= 0
            if not purging:
                assert m.tasks_purged == 0

    def test_load_bounds_with_purging(self):
        m_off = run_simulation(self.scenario(False), seed=7).metrics
        m_on = run_simulation(self.scenario(True), seed=7).metrics
        assert m_off.computational_load == pytest.approx(1.5, abs=0.02)
        assert 1.0 <= m_on.computational_load <= 1.5 + 1e-9

    def test_purge_noop_at_omega_one(self):
        base = self.scenario(False)
        base.omega = 1.0
        on = self.scenario(True)
        on.omega = 1.0
        a = run_simulation(base, seed=8)
        b = run_simulation(on, seed=8)
        assert np.array_equal(a.completions, b.completions)
        assert b.metrics.tasks_purged == 0
        assert b.metrics.computational_load == pytest.approx(1.0, abs=1e-9)


class TestStabilityDichotomy:
    def test_queue_growth_split(self):
        # phi_0 = 0.8 > r_0 = 2/3 unstable; phi_1 = 0.2 < 2/3 stable
        sc = Scenario(
            workers=[SimWorkerSpec(0.5), SimWorkerSpec(0.5)],
            lam=0.3,
            k=10,
            omega=1.0,
            policy=np.array([0.8, 0.2]),
            jobs=500,
        )
        res = run_simulation(sc, seed=9)
        times = np.array([q[0] for q in res.queue_trace])
        q0 = np.array([q[1][0] for q in res.queue_trace], dtype=float)
        q1 = np.array([q[1][1] for q in res.queue_trace], dtype=float)
        half = len(times) // 2
        fit0 = stats.linregress(times[half:], q0[half:])
        fit1 = stats.linregress(times[half:], q1[half:])
        assert fit0.slope > 0 and fit0.pvalue < 0.01
        assert abs(fit1.slope) < 0.1 * fit0.slope

    def test_horizon_cap_flags_truncation(self):
        sc = Scenario(
            workers=[SimWorkerSpec(0.5)],
            lam=0.5,
            k=4,
            omega=1.0,
            policy=np.array([1.0]),
            jobs=50,
            horizon_cap_factor=1e-4,
        )
        m = run_simulation(sc, seed=10).metrics
        assert m.truncated
        assert m.jobs_completed < 50


class TestUniformPolicy:
    def test_uniform_fractions(self):
        sc = Scenario(
            workers=[SimWorkerSpec(0.2)] * 4,
            lam=0.2,
            k=4,
            omega=1.0,
            policy="uniform",
            jobs=50,
        )
        res = run_simulation(sc, seed=11)
        # 4 identical workers, 4 tasks/job -> one task each per job
        assert res.metrics.tasks_generated == 200
        assert res.metrics.jobs_completed == 50


class TestIdealPolicy:
    def test_single_worker_matches_analytic(self):
        sc = single_worker_scenario(30000, lam=0.7, k=1, task_mean=1.0)
        sc.policy = "ideal"
        res = run_simulation(sc, seed=12)
        responses = res.completions - res.arrivals
        want = per_worker_response_time(WorkerProfile(1.0, 2.0), 1.0, 0.7)
        se = batch_mean_se(responses)
        assert abs(responses.mean() - want) < 3 * se

    def test_symmetric_utilization(self):
        sc = Scenario(
            workers=[SimWorkerSpec(0.4), SimWorkerSpec(0.4)],
            lam=0.5,
            k=6,
            omega=1.0,
            policy="ideal",
            jobs=4000,
        )
        res = run_simulation(sc, seed=13)
        u = res.metrics.per_worker_utilization
        assert u[0] == pytest.approx(u[1], rel=0.05)

    def test_ideal_beats_optimal_on_paired_seeds(self):
        workers = [SimWorkerSpec(0.05), SimWorkerSpec(0.08), SimWorkerSpec(0.2)]
        for seed in (14, 15, 16):
            results = {}
            for policy in ("ideal", "optimal"):
                sc = Scenario(
                    workers=workers,
                    lam=0.9,
                    k=12,
                    omega=1.0,
                    policy=policy,
                    resplit_period=0,
                    jobs=3000,
                )
                results[policy] = run_simulation(sc, seed).metrics.mean_in_order_delay
            assert results["ideal"] <= results["optimal"]

    def test_ideal_purging_load(self):
        sc = Scenario(
            workers=[SimWorkerSpec(0.1), SimWorkerSpec(0.12)],
            lam=0.4,
            k=10,
            omega=1.6,
            policy="ideal",
            purging=True,
            jobs=2000,
        )
        m = run_simulation(sc, seed=17).metrics
        assert 1.0 <= m.computational_load <= 1.6
        assert m.tasks_generated == m.tasks_served + m.tasks_purged + m.tasks_residual

    def test_ideal_rejects_unsupported(self):
        sc = single_worker_scenario(10, lam=0.1, k=1, task_mean=1.0)
        sc.policy = "ideal"
        sc.reinforcement = True
        with pytest.raises(ValueError):
            run_simulation(sc, seed=0)


def reinforcement_scenario(reinforce):
    # worker 2 carries 90% of the job and its rate collapses mid-job
    return Scenario(
        workers=[SimWorkerSpec(2.0), SimWorkerSpec(2.0), SimWorkerSpec(0.1)],
        lam=1e-4,
        k=10,
        omega=2.0,
        policy=np.array([0.05, 0.05, 0.9]),
        reinforcement=reinforce,
        theta_reinforce=0.0,
        alpha=0.5,
        beta=0.5,
        feedback_batch=1,
        resplit_period=0,
        jobs=1,
        rate_changes=((0.3, 2, 0.1),),
    )


class TestReinforcement:
    def test_fires_and_helps(self):
        off = run_simulation(reinforcement_scenario(False), seed=18)
        on = run_simulation(reinforcement_scenario(True), seed=18)
        assert on.reinforcement_events
        assert on.completions[0] < off.completions[0]

    def test_targets_only_past_workers(self):
        on = run_simulation(reinforcement_scenario(True), seed=18)
        for ev in on.reinforcement_events:
            assert 2 not in ev["workers"]
            assert all(w in (0, 1) for w in ev["assigned"])

    def test_mu_fb_nondecreasing(self):
        on = run_simulation(reinforcement_scenario(True), seed=18)
        mus = [ev["mu_n"] for ev in on.reinforcement_events]
        assert all(m > 0 for m in mus)

    def test_no_fire_on_schedule(self):
        sc = reinforcement_scenario(True)
        sc.rate_changes = ()
        sc.theta_reinforce = 1e-6
        res = run_simulation(sc, seed=19)
        assert res.reinforcement_events == []

    def test_budget_clamp(self):
        # once a_j >= k(omega-1), m_j = 0: trigger assigns nothing
        sc = reinforcement_scenario(True)
        sc.omega = 1.1  # k(omega-1) = 1, reached almost immediately
        res = run_simulation(sc, seed=20)
        for ev in res.reinforcement_events:
            total = sum(ev["assigned"].values())
            assert total <= 10


class TestRateChanges:
    def test_slowdown_visible(self):
        # negligible load: response ~ service time, so a 4x rate cut
        # quadruples the mean response
        base = single_worker_scenario(300, lam=1e-4, k=2, task_mean=1.0)
        slowed = single_worker_scenario(300, lam=1e-4, k=2, task_mean=1.0)
        slowed.rate_changes = ((0.0, 0, 0.25),)
        a = run_simulation(base, seed=21)
        b = run_simulation(slowed, seed=21)
        ra = (a.completions - a.arrivals).mean()
        rb = (b.completions - b.arrivals).mean()
        assert rb == pytest.approx(4.0 * ra, rel=0.05)
