import numpy as np
import pytest

from conftest import lms
from core.experiment import parse_experiment
from core.sim import (BATCH_RUNS, Comparison, SteadyStateReport, batches, compare_theory, default_horizon,
                      equalization_check, fit_rate, iterations_to_reach, run_experiment)
from core.strategies import stack_samples
from core.theory import mean_stability_matrix, predict
from utils.errors import DigestMismatchError, PreconditionError
from utils.kind import StrategyKind

WITNESS = [[0.05, 0.95], [0.95, 0.05]]


def report_with(**changes):
    base = dict(digest="d", kind="ncop", seed=0, runs=10, iterations=100, window=20, msd=1e-3, msd_se=1e-5,
                msd_agents=[1e-3], msd_agents_se=[1e-5], er=5e-4, er_se=1e-5, alpha_hat=0.99, converged=True)
    base.update(changes)
    return SteadyStateReport(**base)


class TestBatches:
    def test_partition_depends_only_on_runs(self):
        parts = batches(120)
        assert [len(p) for p in parts] == [BATCH_RUNS, BATCH_RUNS, 20]
        assert parts[-1].stop == 120


class TestRunExperiment:
    def test_thread_count_does_not_change_results(self):
        spec = parse_experiment(lms("atc", n_agents=3, runs=2 * BATCH_RUNS + 5, iterations=300, window=100,
                                    topology={"graph": "ring"}, links={"q": 0.6},
                                    step_size={"type": "bernoulli", "mu": 0.05, "p": 0.7}))
        curve_1, report_1 = run_experiment(spec, threads=1)
        curve_3, report_3 = run_experiment(spec, threads=3)
        np.testing.assert_array_equal(curve_1.agents, curve_3.agents)
        assert report_1.to_dict() == report_3.to_dict()

    def test_same_seed_same_curve(self):
        spec = parse_experiment(lms(runs=8, iterations=400, window=100))
        np.testing.assert_array_equal(run_experiment(spec)[0].network, run_experiment(spec)[0].network)

    def test_seed_changes_curve(self):
        first = run_experiment(parse_experiment(lms(runs=8, iterations=400, window=100, seed=1)))[0]
        second = run_experiment(parse_experiment(lms(runs=8, iterations=400, window=100, seed=2)))[0]
        assert not np.array_equal(first.network, second.network)

    def test_curve_starts_at_initial_error(self):
        spec = parse_experiment(lms(dimension=4, runs=5, iterations=50, window=10, mu=1e-9))
        curve, _ = run_experiment(spec)
        # w_o = 1 / sqrt(M) per entry, so |w_o - 0|^2 = 1
        assert curve.network[0] == pytest.approx(1.0, rel=1e-6)

    def test_exact_gradient_converges_to_minimizer(self):
        spec = parse_experiment(lms("atc", n_agents=3, mu=0.05, runs=2, iterations=2000, window=500,
                                    topology={"graph": "ring"}, gradient="exact"))
        _, report = run_experiment(spec)
        assert report.msd < 1e-20
        assert not report.diverged

    def test_consensus_witness_diverges(self):
        spec = parse_experiment(lms("consensus", n_agents=2, mu=0.15, sigma_v2=1e-3, runs=10, iterations=2000,
                                    window=500, topology=WITNESS))
        curve, report = run_experiment(spec)
        assert report.diverged
        iteration = report.divergence["iteration"]
        assert report.divergence["agents"]
        assert np.all(np.isnan(curve.network[iteration:]))
        assert np.all(np.isfinite(curve.network[:iteration]))
        assert report.to_dict()["msd"] is None

    def test_links_always_on_match_static_topology(self):
        base = lms("atc", n_agents=3, runs=2, iterations=50, window=10, topology={"graph": "ring"})
        always_on = dict(base, strategy=dict(base["strategy"], links={"q": 1.0}))
        curve, report = run_experiment(parse_experiment(always_on))
        np.testing.assert_allclose(curve.agents, run_experiment(parse_experiment(base))[0].agents, rtol=1e-10)
        assert not report.diverged

    def test_deterministic_link_pattern(self):
        data = lms("atc", n_agents=3, runs=2, iterations=50, window=10, topology={"graph": "ring"},
                   links={"q": 1.0, "overrides": [{"from": 0, "to": 1, "p": 0.0}]})
        spec = parse_experiment(data)
        assert not spec.strategy.uses_combination
        A = spec.strategy.static_matrix()
        assert A[0, 1] == 0.0
        np.testing.assert_allclose(A.sum(axis=0), 1.0, atol=1e-12)
        curve, report = run_experiment(spec)
        assert np.all(np.isfinite(curve.network))
        assert not report.diverged

    def test_guard_measures_iterate_norm(self):
        # |w_i| = 1 - 0.9^(i + 1) first exceeds 0.5 at i = 6
        spec = parse_experiment(lms(mu=0.05, runs=2, iterations=50, window=10, gradient="exact"))
        curve, report = run_experiment(spec, threshold=0.5)
        assert report.diverged
        assert report.divergence["iteration"] == 6
        assert np.all(np.isfinite(curve.network[:6]))

    def test_centralized_single_row(self):
        spec = parse_experiment(lms("centralized_random_fusion", n_agents=4, runs=4, iterations=200, window=50,
                                    fusion={"q": 0.5}))
        curve, report = run_experiment(spec)
        assert curve.agents.shape == (200, 1)
        assert len(report.msd_agents) == 1

    def test_default_horizon(self):
        spec = parse_experiment(lms(mu=0.01, iterations=None, window=None))
        horizon = default_horizon(spec)
        alpha = 1 - 4 * 0.01
        assert alpha ** (0.75 * horizon) < 0.01
        assert alpha ** (0.75 * (horizon - 2)) >= 0.01

    def test_learning_curve_settles_near_theory(self):
        spec = parse_experiment(lms(mu=0.01, runs=50, iterations=3000, window=1500))
        _, report = run_experiment(spec)
        theory = predict(spec)
        assert abs(report.msd - theory.msd) < max(4 * report.msd_se, 0.2 * theory.msd)
        assert report.converged


class TestRateAndLevels:
    def test_fit_rate_recovers_factor(self):
        t = np.arange(3000)
        curve = 1e-4 + 0.99 ** t
        assert fit_rate(curve, 1e-4) == pytest.approx(0.99, rel=1e-9)

    def test_fit_rate_without_transient(self):
        assert fit_rate(np.full(100, 5.0), 1.0) is None

    def test_iterations_to_reach(self):
        curve = np.array([4.0, 3.0, 2.0, 1.0, 0.5])
        assert iterations_to_reach(curve, 2.0) == 2
        assert iterations_to_reach(curve, 0.1) is None


class TestComparison:
    def test_rows(self):
        theory = predict(parse_experiment(lms()))
        report = report_with(digest=theory.digest, msd=theory.msd * 1.1, er=theory.er * 0.5,
                             alpha_hat=theory.alpha)
        comparison = compare_theory(report, theory, tolerance=0.2)
        rows = {row.quantity: row for row in comparison.rows}
        assert rows["msd"].passed and rows["msd"].relative_error == pytest.approx(0.1)
        assert rows["er"].passed is False
        assert rows["rate"].passed
        assert not comparison.passed

    def test_missing_rate_is_not_a_failure(self):
        theory = predict(parse_experiment(lms()))
        report = report_with(digest=theory.digest, msd=theory.msd, er=theory.er, alpha_hat=None)
        comparison = compare_theory(report, theory)
        assert comparison.rows[-1].passed is None
        assert comparison.passed

    def test_digest_mismatch(self):
        theory = predict(parse_experiment(lms()))
        with pytest.raises(DigestMismatchError):
            compare_theory(report_with(digest="other"), theory)

    def test_diverged_is_not_comparable(self):
        theory = predict(parse_experiment(lms()))
        report = report_with(digest=theory.digest, diverged=True, msd=float("nan"))
        comparison = compare_theory(report, theory)
        assert isinstance(comparison, Comparison)
        assert not comparison.comparable and not comparison.passed
        assert comparison.to_dict()["rows"] == []


class TestEqualization:
    def test_spread(self):
        assert equalization_check(report_with(msd_agents=[1.0, 1.0, 1.0])) == 0.0
        assert equalization_check(report_with(msd_agents=[1.0, 2.0, 3.0])) == pytest.approx(0.5)

    def test_diverged_report(self):
        with pytest.raises(PreconditionError):
            equalization_check(report_with(diverged=True))


@pytest.mark.slow
class TestStepSizeScaling:
    def test_msd_is_linear_in_mu(self):
        ratios = []
        for mu in (0.0025, 0.005, 0.01):
            spec = parse_experiment(lms(mu=mu, runs=50, iterations=12000, window=6000))
            _, report = run_experiment(spec, threads=2)
            ratios.append(report.msd / mu)
        ratios = np.asarray(ratios)
        assert np.max(np.abs(ratios / ratios.mean() - 1.0)) < 0.25


KIND_CONFIGS = {
    "ncop": lms(n_agents=2),
    "centralized_sync": lms("centralized_sync", n_agents=3),
    "centralized_random_mu": lms("centralized_random_mu", n_agents=3,
                                 step_size={"type": "bernoulli", "mu": 0.01, "p": 0.5}),
    "centralized_random_fusion": lms("centralized_random_fusion", n_agents=3, fusion={"q": 0.5}),
    "consensus": lms("consensus", n_agents=3, topology={"graph": "ring"}, links={"q": 0.6}),
    "cta": lms("cta", n_agents=3, topology={"graph": "ring"}, links={"q": 0.6}),
    "atc": lms("atc", n_agents=3, topology={"graph": "ring"}, links={"q": 0.6}),
    "atc_enlarged": lms("atc_enlarged", n_agents=3, topology={"graph": "line"}, C="uniform"),
    "unified": lms("unified", n_agents=2, matrices={"A_1": [[0.5, 0.5], [0.5, 0.5]], "A_2": [[0.6, 0.3], [0.4, 0.7]]}),
}


class TestDeterminism:
    @pytest.mark.parametrize("kind", sorted(KIND_CONFIGS))
    def test_same_seed_same_curve_for_every_kind(self, kind):
        data = dict(KIND_CONFIGS[kind], runs=6, iterations=150, window=50)
        first, first_report = run_experiment(parse_experiment(data))
        second, second_report = run_experiment(parse_experiment(data))
        np.testing.assert_array_equal(first.agents, second.agents)
        np.testing.assert_array_equal(first.er, second.er)
        assert first_report.to_dict() == second_report.to_dict()

    def test_every_kind_has_a_config(self):
        assert set(KIND_CONFIGS) == {kind.value for kind in StrategyKind}


class TestMeanRecursion:
    def test_average_error_follows_mean_matrix(self):
        R_u = [[[1.0, 0.0], [0.0, 0.5]], [[1.5, 0.3], [0.3, 1.0]], [[0.8, 0.0], [0.0, 0.8]]]
        mu = 0.05
        data = lms("atc", n_agents=3, mu=mu, topology={"graph": "line"})
        data["agents"]["R_u"] = R_u
        spec = parse_experiment(data)
        B, _ = mean_stability_matrix("atc", spec.strategy.static_matrix(), [mu] * 3, R_u)
        rng = np.random.default_rng(2024)
        runs = 4000
        w = np.zeros((runs, 3, 2))
        expected = np.tile(spec.w_o, 3)
        for i in range(1, 21):
            sample = stack_samples([agent.data.sample(rng, runs) for agent in spec.agents])
            w = spec.strategy.update(w, np.full((runs, 3), mu), sample)
            expected = B @ expected
            if i % 5 == 0:
                np.testing.assert_allclose((spec.w_o - w).mean(axis=0).reshape(-1), expected, atol=0.02)
        assert np.linalg.norm(expected) < 0.5 * np.linalg.norm(np.tile(spec.w_o, 3))
