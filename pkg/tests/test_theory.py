import numpy as np
import pytest

from conftest import lms
from core.experiment import parse_experiment
from core.theory import (break_even_variance, centralized_theory, convergence_factor, fusion_degradation,
                         mean_stability_matrix, network_theory, predict, single_agent_theory, stability_bound)
from core.topology import StaticCombinationPolicy, build_graph, combination_matrix, metropolis_weights, perron_data
from utils.errors import ConfigError, PreconditionError

WITNESS = [[0.05, 0.95], [0.95, 0.05]]


def lms_profile(M, sigma_v2, scale=1.0):
    R_u = scale * np.eye(M)
    return 2.0 * R_u, 4.0 * sigma_v2 * R_u


class TestSingleAgent:
    def test_lms_msd(self):
        H, R_s = lms_profile(5, 0.01)
        theory = single_agent_theory(H, R_s, 0.002)
        assert theory.msd == pytest.approx(0.002 * 5 * 0.01, rel=1e-12)
        assert theory.er == pytest.approx(0.002 * 0.01 * 5, rel=1e-12)
        assert theory.alpha == pytest.approx(1 - 4 * 0.002)

    def test_bernoulli_keeps_msd_and_slows_rate(self):
        H, R_s = lms_profile(5, 0.01)
        mu, p = 0.002, 0.5
        sync = single_agent_theory(H, R_s, mu)
        asynchronous = single_agent_theory(H, R_s, p * mu, p * (1 - p) * mu ** 2)
        assert asynchronous.msd == pytest.approx(sync.msd, rel=1e-12)
        assert (1 - asynchronous.alpha) == pytest.approx(p * (1 - sync.alpha))

    def test_rejects_indefinite_hessian(self):
        with pytest.raises(PreconditionError) as exc:
            single_agent_theory(np.diag([1.0, 0.0]), np.eye(2), 0.01)
        assert exc.value.invariant == "spd"

    def test_stability_and_convergence_factor(self):
        assert stability_bound(2.0, 2.0, 12.0) == pytest.approx(0.25)
        assert convergence_factor(2.0, 2.0, 12.0, 0.1) == pytest.approx(1 - 0.4 + 16 * 0.01)
        assert convergence_factor(2.0, 2.0, 12.0, 0.05, 0.0025) == pytest.approx(1 - 0.2 + 16 * 0.005)


    def test_stability_bound_separates_contracting_steps(self):
        nu, delta, beta2 = 2.0, 3.0, 12.0
        mu_o = stability_bound(nu, delta, beta2)
        for mu in np.linspace(0.01, 0.99, 25) * mu_o:
            assert convergence_factor(nu, delta, beta2, mu) < 1.0
        assert convergence_factor(nu, delta, beta2, mu_o) == pytest.approx(1.0)
        for mu in np.linspace(1.01, 2.0, 10) * mu_o:
            assert convergence_factor(nu, delta, beta2, mu) > 1.0


class TestCentralized:
    def test_nfold_improvement(self):
        N, mu = 5, 0.002
        H, R_s = lms_profile(2, 0.01)
        centralized = centralized_theory([H] * N, [R_s] * N, mu, 0.0, np.full(N, 1 / N), np.zeros(N))
        single = single_agent_theory(H, R_s, mu)
        assert centralized.msd == pytest.approx(single.msd / N, rel=1e-12)
        assert centralized.alpha == pytest.approx(single.alpha)

    def test_heterogeneous_noise_lies_between_agents(self):
        mu, sigma = 0.002, 0.01
        profiles = [lms_profile(2, sigma), lms_profile(2, 5 * sigma)]
        centralized = centralized_theory([p[0] for p in profiles], [p[1] for p in profiles], mu, 0.0,
                                         [0.5, 0.5], [0.0, 0.0])
        agents = [single_agent_theory(H, R_s, mu).msd for H, R_s in profiles]
        assert centralized.msd == pytest.approx(1.5 * mu * 2 * sigma, rel=1e-12)
        assert agents[0] < centralized.msd < agents[1]

    def test_random_fusion_degradation(self):
        N, sigma_pi2 = 5, 0.0553763
        H, R_s = lms_profile(2, 0.01)
        sync = centralized_theory([H] * N, [R_s] * N, 0.002, 0.0, np.full(N, 1 / N), np.zeros(N))
        fused = centralized_theory([H] * N, [R_s] * N, 0.002, 0.0, np.full(N, 1 / N), np.full(N, sigma_pi2))
        assert fused.msd / sync.msd == pytest.approx(1 + N ** 2 * sigma_pi2, rel=1e-12)
        assert fusion_degradation(N, sigma_pi2) == pytest.approx((1 + N ** 2 * sigma_pi2) / N)

    def test_break_even(self):
        for N in (2, 5, 10):
            assert fusion_degradation(N, break_even_variance(N)) == pytest.approx(1.0)

    def test_random_step_reports_mean_rate(self):
        H, R_s = lms_profile(2, 0.01)
        theory = centralized_theory([H] * 4, [R_s] * 4, 0.001, 1e-6, np.full(4, 0.25), np.zeros(4))
        assert theory.alpha_mean == pytest.approx(1 - 2 * 8 * 0.001 / 4)
        assert theory.alpha == pytest.approx(1 - 2 * 8 * 0.002 / 4)

    def test_fusion_mean_must_be_on_simplex(self):
        H, R_s = lms_profile(2, 0.01)
        with pytest.raises(PreconditionError):
            centralized_theory([H] * 2, [R_s] * 2, 0.01, 0.0, [0.7, 0.7], [0.0, 0.0])


class TestNetwork:
    def test_diffusion_matches_centralized(self):
        N, mu = 5, 0.002
        sigmas = [0.01, 0.02, 0.03, 0.04, 0.05]
        A = metropolis_weights(build_graph("ring", N))
        perron = perron_data(*StaticCombinationPolicy(A).moments())
        profiles = [lms_profile(2, s) for s in sigmas]
        theory = network_theory([p[0] for p in profiles], [p[1] for p in profiles], [mu] * N, [0.0] * N, perron)
        assert theory.msd == pytest.approx(mu * 2 / N * np.mean(sigmas), rel=1e-9)

    def test_enlarged_with_identity_equals_atc(self):
        N = 4
        A = metropolis_weights(build_graph("ring", N))
        perron = perron_data(*StaticCombinationPolicy(A).moments())
        profiles = [lms_profile(2, 0.01 * (k + 1), 1.0 + k) for k in range(N)]
        H, R_s = [p[0] for p in profiles], [p[1] for p in profiles]
        atc = network_theory(H, R_s, [0.01] * N, [0.0] * N, perron)
        enlarged = network_theory(H, R_s, [0.01] * N, [0.0] * N, perron, C=np.eye(N))
        assert enlarged.msd == pytest.approx(atc.msd, rel=1e-12)
        assert enlarged.er == pytest.approx(atc.er, rel=1e-12)


class TestStabilityMatrix:
    def test_consensus_instability_witness(self):
        R_u = [np.eye(2)] * 2
        _, consensus = mean_stability_matrix("consensus", WITNESS, [0.15, 0.15], R_u)
        _, atc = mean_stability_matrix("atc", WITNESS, [0.15, 0.15], R_u)
        _, cta = mean_stability_matrix("cta", WITNESS, [0.15, 0.15], R_u)
        _, ncop = mean_stability_matrix("ncop", None, [0.15, 0.15], R_u)
        assert consensus == pytest.approx(1.2)
        assert atc == pytest.approx(0.7)
        assert cta == pytest.approx(0.7)
        assert ncop == pytest.approx(0.7)

    def test_diffusion_never_slower_than_non_cooperation(self):
        rng = np.random.default_rng(11)
        for seed in range(20):
            N, M = 5, 2
            A = combination_matrix(build_graph("erdos_renyi", N, p=0.4, seed=seed), ("metropolis", "averaging")[seed % 2])
            X = rng.standard_normal((N, M, M))
            R_u = [x @ x.T + 0.1 * np.eye(M) for x in X]
            mu = rng.uniform(0.01, 0.2, N)
            _, ncop = mean_stability_matrix("ncop", None, mu, R_u)
            for kind in ("atc", "cta"):
                assert mean_stability_matrix(kind, A, mu, R_u)[1] <= ncop + 1e-10

    def test_centralized_has_no_matrix(self):
        with pytest.raises(ConfigError):
            mean_stability_matrix("centralized_sync", None, [0.1], [np.eye(2)])


class TestPredict:
    def test_single_agent_config(self):
        report = predict(parse_experiment(lms(dimension=5)))
        assert report.msd == pytest.approx(0.002 * 5 * 0.01, rel=1e-12)
        assert report.msd_agents == [pytest.approx(report.msd)]

    def test_one_agent_network_equals_single_agent(self):
        single = predict(parse_experiment(lms(dimension=3)))
        network = predict(parse_experiment(lms("atc", dimension=3, topology=[[1.0]])))
        assert network.msd == pytest.approx(single.msd, rel=1e-9)
        assert network.er == pytest.approx(single.er, rel=1e-9)
        assert network.alpha == pytest.approx(single.alpha, rel=1e-12)

    def test_consensus_witness_reports_spectral_radius(self):
        report = predict(parse_experiment(lms("consensus", n_agents=2, mu=0.15, topology=WITNESS)))
        assert report.spectral_radius == pytest.approx(1.2)

    def test_centralized_inputs(self):
        report = predict(parse_experiment(lms("centralized_sync", n_agents=5)))
        assert report.msd == pytest.approx(0.002 * 2 * 0.01 / 5, rel=1e-12)
        np.testing.assert_allclose(report.inputs["pi_bar"], 0.2)
        assert report.spectral_radius is None

    def test_async_links_weights(self):
        data = lms("atc", n_agents=5, topology={"graph": "ring"}, links={"q": 0.7})
        report = predict(parse_experiment(data))
        p_c = np.asarray(report.inputs["p_c_diag"])
        assert np.all(p_c > 0.04)
        assert report.msd > predict(parse_experiment(lms("atc", n_agents=5, topology={"graph": "ring"}))).msd

    def test_periodic_topology_fails_precondition(self):
        with pytest.raises(PreconditionError):
            predict(parse_experiment(lms("atc", n_agents=2, topology=[[0.0, 1.0], [1.0, 0.0]])))

    def test_digest_is_carried(self):
        spec = parse_experiment(lms())
        assert predict(spec).digest == spec.digest
