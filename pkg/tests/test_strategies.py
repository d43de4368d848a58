import numpy as np
import pytest

from core.costs import CostBank, LinearRegressionModel, RegressionSample
from core.stepsize import BernoulliStepSize, ConstantStepSize
from core.strategies import (FusionSampler, Strategy, advance, consensus_average, fuse, gradient_oracle,
                             neighborhood_uniform_C, stack_samples, step_atc_enlarged, step_centralized,
                             step_network, step_single, step_unified)
from core.topology import (OnOffCombinationPolicy, StaticCombinationPolicy, build_graph, metropolis_weights,
                           validate_right_stochastic)
from utils.errors import ConfigError, DivergenceError, PreconditionError
from utils.kind import StrategyKind

N, M = 4, 3


@pytest.fixture
def models():
    return [LinearRegressionModel(w_o=np.ones(M) / np.sqrt(M), R_u=(1.0 + 0.5 * k) * np.eye(M), sigma_v2=0.01 * (k + 1))
            for k in range(N)]


@pytest.fixture
def bank(models):
    return CostBank([m.cost() for m in models])


@pytest.fixture
def ring():
    return metropolis_weights(build_graph("ring", N))


@pytest.fixture
def sample(models, rng):
    return stack_samples([m.sample(rng) for m in models])


def constant_steps(mu=0.01):
    return [ConstantStepSize(mu) for _ in range(N)]


class TestUnifiedCollapse:
    @pytest.mark.parametrize("kind, slot", [("consensus", "A_o"), ("cta", "A_1"), ("atc", "A_2")])
    def test_named_strategy_is_unified_special_case(self, kind, slot, bank, ring, sample, rng):
        w = rng.standard_normal((N, M))
        mu = np.full(N, 0.01)
        named = step_network(kind, bank, w, ring, mu, sample)
        matrices = {"A_o": None, "A_1": None, "A_2": None, slot: ring}
        unified = step_unified(w, bank=bank, mu=mu, sample=sample, **matrices)
        np.testing.assert_array_equal(named, unified)

    @pytest.mark.parametrize("kind, slot", [("consensus", "A_o"), ("cta", "A_1"), ("atc", "A_2")])
    @pytest.mark.parametrize("finite", [False, True])
    def test_collapse_holds_for_random_realizations(self, kind, slot, finite, bank, ring, sample, rng):
        policy = OnOffCombinationPolicy(ring, 0.5)
        if finite:
            policy = policy.enumerate()
        w = rng.standard_normal((N, M))
        mu = np.full(N, 0.01)
        for A in policy.sample(rng, 5):
            named = step_network(kind, bank, w, A, mu, sample)
            matrices = {"A_o": None, "A_1": None, "A_2": None, slot: A}
            np.testing.assert_array_equal(named, step_unified(w, bank=bank, mu=mu, sample=sample, **matrices))

    def test_strategy_update_matches_unified_strategy(self, bank, ring, sample, rng):
        w = rng.standard_normal((5, N, M))
        mu = np.full((5, N), 0.02)
        atc = Strategy(StrategyKind.ATC, bank, constant_steps(), policy=StaticCombinationPolicy(ring))
        unified = Strategy(StrategyKind.UNIFIED, bank, constant_steps(), matrices={"A_2": ring})
        np.testing.assert_array_equal(atc.update(w, mu, sample), unified.update(w, mu, sample))

    def test_enlarged_with_identity_is_atc(self, bank, ring, sample, rng):
        w = rng.standard_normal((N, M))
        mu = np.full(N, 0.01)
        np.testing.assert_allclose(step_atc_enlarged(w, ring, np.eye(N), bank, mu, sample),
                                   step_network("atc", bank, w, ring, mu, sample), rtol=1e-14, atol=1e-15)

    def test_ncop_is_independent_agents(self, models, bank, sample, rng):
        w = rng.standard_normal((N, M))
        out = advance(w, np.full(N, 0.05), gradient_oracle(bank, sample))
        for k, model in enumerate(models):
            single = step_single(model.cost(), w[k], ConstantStepSize(0.05),
                                 RegressionSample(sample.u[k], sample.d[k]), rng)
            np.testing.assert_allclose(out[k], single, rtol=1e-14)


class TestSteps:
    def test_centralized_uniform_fusion_averages_gradients(self, bank, sample, rng):
        w = rng.standard_normal(M)
        out = step_centralized(bank, w, ConstantStepSize(0.1), FusionSampler(N), sample, rng, exact=True)
        expected = w - 0.1 * np.mean([cost.gradient(w) for cost in bank.costs], axis=0)
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_divergence_guard(self, bank, ring, sample):
        w = np.full((N, M), 1e13)
        with pytest.raises(DivergenceError) as exc:
            step_network("atc", bank, w, ring, np.full(N, 0.01), sample, iteration=17)
        assert exc.value.iteration == 17
        assert exc.value.agents

    def test_exact_gradient_fixed_point(self, bank, ring):
        w_o = np.broadcast_to(np.ones(M) / np.sqrt(M), (N, M))
        out = step_network("consensus", bank, w_o, ring, np.full(N, 0.1), None, exact=True)
        np.testing.assert_allclose(out, w_o, atol=1e-14)

    def test_stochastic_needs_sample(self, bank):
        with pytest.raises(ConfigError):
            gradient_oracle(bank, None)

    def test_fuse_shape(self, rng):
        gradients = rng.standard_normal((7, N, M))
        pi = np.full((7, N), 1.0 / N)
        np.testing.assert_allclose(fuse(pi, gradients)[:, 0], gradients.mean(axis=1))


class TestReferenceCases:
    @pytest.fixture
    def pair(self):
        models = [LinearRegressionModel(w_o=np.array([1.0]), R_u=np.array([[r]]), sigma_v2=0.01) for r in (1.0, 2.0)]
        return CostBank([m.cost() for m in models]), np.array([[0.7, 0.4], [0.3, 0.6]])

    # gradients 2(w - 1) and 4(w - 1) from w = (0, 2) with mu = 0.1
    @pytest.mark.parametrize("kind, expected", [("consensus", [0.8, 0.8]), ("cta", [0.68, 1.12]), ("atc", [0.62, 1.04])])
    def test_two_agent_step(self, kind, expected, pair):
        bank, A = pair
        out = step_network(kind, bank, np.array([[0.0], [2.0]]), A, np.full(2, 0.1), None, exact=True)
        np.testing.assert_allclose(out[:, 0], expected, rtol=1e-12)

    @pytest.mark.parametrize("kind", ["consensus", "cta", "atc"])
    def test_sleeping_network_only_combines(self, kind, bank, ring, models, rng):
        w0 = rng.standard_normal((N, M))
        w = w0
        for _ in range(10):
            sample = stack_samples([m.sample(rng) for m in models])
            w = step_network(kind, bank, w, ring, np.zeros(N), sample)
        np.testing.assert_allclose(w, np.linalg.matrix_power(ring.T, 10) @ w0, rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("kind", ["ncop", "consensus", "cta", "atc"])
    def test_noiseless_data_converges_to_minimizer(self, kind, ring, rng):
        w_o = np.array([0.5, -1.0, 2.0])
        models = [LinearRegressionModel(w_o=w_o, R_u=(1.0 + 0.5 * k) * np.eye(M), sigma_v2=0.0) for k in range(N)]
        strategy = Strategy(StrategyKind.parse(kind), CostBank([m.cost() for m in models]), constant_steps(0.05),
                            policy=None if kind == "ncop" else StaticCombinationPolicy(ring))
        mu = np.full(N, 0.05)
        at_minimizer = strategy.update(np.tile(w_o, (N, 1)), mu, stack_samples([m.sample(rng) for m in models]))
        np.testing.assert_allclose(at_minimizer, np.tile(w_o, (N, 1)), atol=1e-12)
        w = np.zeros((N, M))
        for _ in range(600):
            w = strategy.update(w, mu, stack_samples([m.sample(rng) for m in models]))
        np.testing.assert_allclose(w, np.tile(w_o, (N, 1)), atol=1e-8)

    def test_enlarged_uniform_network_is_centralized(self, bank, rng):
        U = np.full((N, N), 1.0 / N)
        w = rng.standard_normal((N, M))
        out = step_atc_enlarged(w, U, U, bank, np.full(N, 0.1), None, exact=True)
        centralized = step_centralized(bank, w.mean(axis=0), ConstantStepSize(0.1), FusionSampler(N), None, rng,
                                       exact=True)
        np.testing.assert_allclose(out, np.tile(centralized, (N, 1)), rtol=1e-12, atol=1e-14)


class TestConsensusAveraging:
    def test_converges_to_mean(self, rng):
        A = metropolis_weights(build_graph("ring", 6))
        values = rng.standard_normal(6)
        np.testing.assert_allclose(consensus_average(values, A, 600), np.full(6, values.mean()), atol=1e-10)

    def test_needs_doubly_stochastic(self):
        A = np.array([[0.5, 0.2], [0.5, 0.8]])
        with pytest.raises(PreconditionError) as exc:
            consensus_average(np.ones(2), A, 10)
        assert exc.value.invariant == "simplex"

    def test_periodic_cannot_average(self):
        with pytest.raises(PreconditionError):
            consensus_average(np.ones(2), np.array([[0.0, 1.0], [1.0, 0.0]]), 10)


class TestFusionSampler:
    def test_samples_lie_on_simplex(self, rng):
        pi = FusionSampler(5, "on_off", q=0.3).sample(rng, 10_000)
        np.testing.assert_allclose(pi.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(pi >= 0)

    def test_exact_variance(self):
        moments = FusionSampler(5, "on_off", q=0.5).exact_moments()
        expected = (5 + 5 + 10 / 3 + 5 / 4 + 1 / 5) / 31 / 5 - 1 / 25
        np.testing.assert_allclose(moments.sigma_pi2, expected, rtol=1e-12)
        np.testing.assert_allclose(moments.c_pi.sum(axis=1), 0.0, atol=1e-15)
        np.testing.assert_allclose(1 + 25 * expected, 2.3844, atol=1e-3)

    def test_measured_moments(self, rng):
        sampler = FusionSampler(5, "on_off", q=0.5)
        measured = sampler.measure(rng, 200_000)
        exact = sampler.exact_moments()
        np.testing.assert_allclose(measured.pi_bar, exact.pi_bar, atol=2e-3)
        np.testing.assert_allclose(measured.sigma_pi2, exact.sigma_pi2, atol=2e-3)
        np.testing.assert_allclose(measured.c_pi.sum(axis=1), 0.0, atol=1e-12)

    def test_deterministic_schemes(self):
        sampler = FusionSampler(3, "fixed", weights=[0.2, 0.3, 0.5])
        assert not sampler.is_random
        np.testing.assert_allclose(sampler.sample(None), [0.2, 0.3, 0.5])
        with pytest.raises(PreconditionError):
            FusionSampler(3, "fixed", weights=[0.2, 0.3, 0.6])
        with pytest.raises(ConfigError):
            FusionSampler(3, "on_off", q=0.0)


class TestStrategyValidation:
    def test_sync_centralized_needs_constant_step(self, bank):
        with pytest.raises(ConfigError):
            Strategy(StrategyKind.CENTRALIZED_SYNC, bank, [BernoulliStepSize(0.01, 0.5)])

    def test_mean_graph_must_be_connected(self, bank):
        A = np.kron(np.eye(2), np.full((2, 2), 0.5))
        with pytest.raises(PreconditionError) as exc:
            Strategy(StrategyKind.ATC, bank, constant_steps(), policy=StaticCombinationPolicy(A))
        assert exc.value.invariant == "strongly_connected"

    def test_step_size_count(self, bank, ring):
        with pytest.raises(ConfigError):
            Strategy(StrategyKind.ATC, bank, constant_steps()[:2], policy=StaticCombinationPolicy(ring))

    def test_enlarged_C_must_respect_neighborhoods(self, bank, ring):
        C = np.full((N, N), 1.0 / N)
        with pytest.raises(ConfigError, match="neighborhood"):
            Strategy(StrategyKind.ATC_ENLARGED, bank, constant_steps(), policy=StaticCombinationPolicy(ring), C=C)

    def test_neighborhood_uniform_C(self, ring):
        C = neighborhood_uniform_C(ring)
        assert validate_right_stochastic(C)
        np.testing.assert_array_equal(C > 0, ring > 0)

    def test_random_links_use_combination_stream(self, bank, ring):
        strategy = Strategy(StrategyKind.CTA, bank, constant_steps(), policy=OnOffCombinationPolicy(ring, 0.5))
        assert strategy.uses_combination
        assert strategy.static_matrix() is None
