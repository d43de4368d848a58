"""Closed-form performance predictions and mean-error stability analysis.

Every steady-state expression here is first order in the step size: the
O(mu^{3/2}) and O(mu^2) remainders are dropped. Traces of H^{-1} R are
taken with symmetric positive-definite solves, never explicit inverses.
"""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg

from core.costs import LinearRegressionModel
from core.experiment import ExperimentSpec
from core.strategies import FusionMoments
from core.topology import PerronData, perron_data
from utils.digest import to_jsonable
from utils.errors import ConfigError, PreconditionError
from utils.kind import StrategyKind
from utils.logger import log_action
from utils.seeding import auxiliary_generator

SPD_RTOL = 1e-12
FUSION_MEASURE_DRAWS = 200_000


def _spd(H, name: str = "H") -> np.ndarray:
    H = np.asarray(H, dtype=float)
    H = 0.5 * (H + H.T)
    eigenvalues = np.linalg.eigvalsh(H)
    if eigenvalues[0] <= SPD_RTOL * max(eigenvalues[-1], 0.0) or eigenvalues[0] <= 0:
        raise PreconditionError(f"{name} is not positive-definite (min eigenvalue {eigenvalues[0]:.3g})", invariant="spd")
    return H


def _psd(R, name: str = "R_s") -> np.ndarray:
    R = np.asarray(R, dtype=float)
    R = 0.5 * (R + R.T)
    eigenvalues = np.linalg.eigvalsh(R)
    if eigenvalues[0] < -SPD_RTOL * max(abs(eigenvalues[-1]), 1.0):
        raise PreconditionError(f"{name} is not positive semi-definite", invariant="spd")
    return R


def _trace_solve(H: np.ndarray, R: np.ndarray) -> float:
    return float(np.trace(linalg.solve(H, R, assume_a="pos")))


def _mu_x(mu_bar: float, sigma_mu2: float) -> float:
    if mu_bar <= 0:
        raise PreconditionError("mean step size must be positive", invariant="positive_mean")
    return mu_bar + sigma_mu2 / mu_bar


@dataclass(frozen=True)
class SingleAgentTheory:
    msd: float
    er: float
    alpha: float


@dataclass(frozen=True)
class CentralizedTheory:
    msd: float
    er: float
    alpha: float
    alpha_mean: float


@dataclass(frozen=True)
class NetworkTheory:
    msd: float
    er: float
    alpha: float
    inputs: Dict = field(default_factory=dict)


def single_agent_theory(H, R_s, mu_bar: float, sigma_mu2: float = 0.0, nu: Optional[float] = None) -> SingleAgentTheory:
    """MSD = (mu_x/2) Tr(H^-1 R_s), ER = (mu_x/4) Tr(R_s), alpha = 1 - 2 nu mu_bar."""
    H, R_s = _spd(H), _psd(R_s)
    mu_x = _mu_x(mu_bar, sigma_mu2)
    nu = float(np.linalg.eigvalsh(H)[0]) if nu is None else float(nu)
    return SingleAgentTheory(msd=0.5 * mu_x * _trace_solve(H, R_s), er=0.25 * mu_x * float(np.trace(R_s)),
                             alpha=1.0 - 2.0 * nu * mu_bar)


def centralized_theory(H_k: Sequence[np.ndarray], R_sk: Sequence[np.ndarray], mu_bar: float, sigma_mu2: float,
                       pi_bar: Sequence[float], sigma_pi2: Sequence[float], nu_c: Optional[float] = None) -> CentralizedTheory:
    """Fused-gradient recursion w <- w - mu(i) sum_k pi_k(i) grad J_k(w).

    MSD = (mu_x N / 2) Tr[(sum_k H_k)^-1 sum_k (pi_bar_k^2 + sigma_pi_k^2) R_sk].
    With uniform means this is the (1 + N^2 sigma_pi^2) weighting. ``alpha``
    is the bound 1 - 2 nu_c mu_x / N; ``alpha_mean`` uses mu_bar in place of
    mu_x and is the rate of the mean error.
    """
    N = len(H_k)
    if N == 0 or len(R_sk) != N or len(pi_bar) != N or len(sigma_pi2) != N:
        raise ConfigError("need one Hessian, noise covariance and fusion moment per agent", field="agents")
    pi_bar = np.asarray(pi_bar, dtype=float)
    if np.any(pi_bar < -SPD_RTOL) or abs(pi_bar.sum() - 1.0) > 1e-9:
        raise PreconditionError("mean fusion weights must lie on the simplex", invariant="simplex")
    H_sum = _spd(np.sum(H_k, axis=0), "sum of Hessians")
    weights = pi_bar ** 2 + np.asarray(sigma_pi2, dtype=float)
    S = sum(w * _psd(R) for w, R in zip(weights, R_sk))
    mu_x = _mu_x(mu_bar, sigma_mu2)
    nu_c = float(np.linalg.eigvalsh(H_sum)[0]) if nu_c is None else float(nu_c)
    return CentralizedTheory(msd=0.5 * mu_x * N * _trace_solve(H_sum, S), er=0.25 * mu_x * float(np.trace(S)),
                             alpha=1.0 - 2.0 * nu_c * mu_x / N, alpha_mean=1.0 - 2.0 * nu_c * mu_bar / N)


def network_theory(H_k: Sequence[np.ndarray], R_sk: Sequence[np.ndarray], mu_bar_k: Sequence[float],
                   sigma_mu2_k: Sequence[float], perron: PerronData, C: Optional[np.ndarray] = None) -> NetworkTheory:
    """Network MSD (1/2) Tr[D^-1 S] with D = sum_k mu_bar_k p_bar_k H_k and alpha = 1 - 2 lambda_min(D).

    The noise term is S = sum_k (mu_bar_k^2 + sigma_mu_k^2) p_c,kk R_sk. With
    a gradient-aggregation matrix C the Hessians become H'_k = sum_l c_lk H_l
    and R_sl is weighted by sum_{k,k'} c_lk c_lk' E[mu_k mu_k'] p_c,kk'.
    The excess risk is the average of Tr(H_k P) / 2 over agents, where P
    solves D P + P D = S.
    """
    H_k = np.asarray([_spd(H) if C is None else np.asarray(H, dtype=float) for H in H_k])
    R_sk = np.asarray([_psd(R) for R in R_sk])
    mu_bar_k = np.asarray(mu_bar_k, dtype=float)
    sigma_mu2_k = np.asarray(sigma_mu2_k, dtype=float)
    N = len(H_k)
    if any(len(x) != N for x in (R_sk, mu_bar_k, sigma_mu2_k, perron.p_bar)):
        raise ConfigError("need one Hessian, noise covariance, step size and Perron entry per agent", field="agents")
    G = (np.outer(mu_bar_k, mu_bar_k) + np.diag(sigma_mu2_k)) * perron.P_c
    if C is None:
        H_eff, noise_weights = H_k, np.diag(G).copy()
    else:
        C = np.asarray(C, dtype=float)
        H_eff = np.einsum("lk,lij->kij", C, H_k)
        noise_weights = np.diag(C @ G @ C.T).copy()
    D = _spd(np.einsum("k,kij->ij", mu_bar_k * perron.p_bar, H_eff), "weighted Hessian sum")
    S = np.einsum("k,kij->ij", noise_weights, R_sk)
    P = linalg.solve_continuous_lyapunov(D, S)
    er = float(np.mean([0.5 * np.sum(H * P) for H in H_k]))
    return NetworkTheory(msd=0.5 * _trace_solve(D, S), er=er, alpha=1.0 - 2.0 * float(np.linalg.eigvalsh(D)[0]),
                         inputs={"noise_weights": noise_weights, "p_bar": perron.p_bar, "p_c_diag": perron.p_c_diag})


def mean_stability_matrix(kind, A_bar, mu_bar_k: Sequence[float], R_uk: Sequence[np.ndarray],
                          C: Optional[np.ndarray] = None, matrices: Optional[Dict] = None):
    """Mean-error matrix B_bar of an MSE network and its spectral radius.

    With calA = A_bar (x) I_M, R = blockdiag(2 R_uk) and Mbar = blockdiag(mu_bar_k I_M):
    ncop I - Mbar R, consensus calA^T - Mbar R, atc calA^T (I - Mbar R),
    cta (I - Mbar R) calA^T.
    """
    kind = StrategyKind.parse(kind)
    R_uk = [np.asarray(R, dtype=float) for R in R_uk]
    N, M = len(R_uk), R_uk[0].shape[0]
    I = np.eye(N * M)
    H_blocks = [2.0 * R for R in R_uk]
    if C is not None:
        H_blocks = [sum(C[l, k] * H_blocks[l] for l in range(N)) for k in range(N)]
    MR = np.kron(np.diag(np.asarray(mu_bar_k, dtype=float)), np.eye(M)) @ linalg.block_diag(*H_blocks)

    def lift(A):
        return I if A is None else np.kron(np.asarray(A, dtype=float), np.eye(M)).T

    if kind == StrategyKind.NCOP:
        B = I - MR
    elif kind == StrategyKind.CONSENSUS:
        B = lift(A_bar) - MR
    elif kind in (StrategyKind.ATC, StrategyKind.ATC_ENLARGED):
        B = lift(A_bar) @ (I - MR)
    elif kind == StrategyKind.CTA:
        B = (I - MR) @ lift(A_bar)
    elif kind == StrategyKind.UNIFIED:
        matrices = matrices or {}
        B = lift(matrices.get("A_2")) @ (lift(matrices.get("A_o")) - MR) @ lift(matrices.get("A_1"))
    else:
        raise ConfigError(f"no mean-error matrix for {kind.value}", field="kind")
    return B, float(np.max(np.abs(np.linalg.eigvals(B))))


def stability_bound(nu: float, delta: float, beta2: float) -> float:
    """mu_o = 2 nu / (delta^2 + beta^2)."""
    if nu <= 0 or delta < nu or beta2 < 0:
        raise PreconditionError(f"need 0 < nu <= delta and beta2 >= 0, got nu={nu}, delta={delta}, beta2={beta2}",
                                invariant="spd")
    return 2.0 * nu / (delta ** 2 + beta2)


def convergence_factor(nu: float, delta: float, beta2: float, mu_bar: float, sigma_mu2: float = 0.0) -> float:
    """alpha = 1 - 2 nu mu_bar + (delta^2 + beta^2)(mu_bar^2 + sigma_mu^2)."""
    stability_bound(nu, delta, beta2)
    return 1.0 - 2.0 * nu * mu_bar + (delta ** 2 + beta2) * (mu_bar ** 2 + sigma_mu2)


def fusion_degradation(n_agents: int, sigma_pi2: float) -> float:
    """Centralized MSD over the average non-cooperative MSD, (1 + N^2 sigma_pi^2) / N."""
    return (1.0 + n_agents ** 2 * sigma_pi2) / n_agents


def break_even_variance(n_agents: int) -> float:
    """Fusion variance at which the centralized solution matches non-cooperation."""
    return (n_agents - 1) / n_agents ** 2


@dataclass
class TheoryReport:
    digest: str
    kind: str
    msd: float
    msd_agents: List[float]
    er: Optional[float]
    alpha: float
    spectral_radius: Optional[float] = None
    inputs: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return to_jsonable(asdict(self))


def _fusion_moments(spec: ExperimentSpec) -> FusionMoments:
    fusion = spec.strategy.fusion
    if not fusion.is_random:
        return fusion.exact_moments()
    return fusion.measure(auxiliary_generator(spec.seed, 0), FUSION_MEASURE_DRAWS)


def predict(spec: ExperimentSpec) -> TheoryReport:
    """First-order predictions for the configured strategy."""
    strategy = spec.strategy
    kind = strategy.kind
    profiles = spec.noise_profiles()
    H = [p.H for p in profiles]
    R_s = [p.R_s for p in profiles]
    moments = [proc.moments() for proc in strategy.step_sizes]
    mu_bar = np.array([m.mu_bar for m in moments])
    sigma_mu2 = np.array([m.sigma_mu2 for m in moments])
    inputs = {"mu_bar": mu_bar, "sigma_mu2": sigma_mu2, "mu_x": [m.mu_x for m in moments]}
    spectral_radius = None
    R_u = [agent.data.R_u for agent in spec.agents] if spec.family == "mse" else [h / 2.0 for h in H]

    if kind == StrategyKind.NCOP:
        per_agent = [single_agent_theory(H[k], R_s[k], mu_bar[k], sigma_mu2[k]) for k in range(spec.n_agents)]
        msd_agents = [t.msd for t in per_agent]
        report = TheoryReport(spec.digest, kind.value, float(np.mean(msd_agents)), msd_agents,
                              float(np.mean([t.er for t in per_agent])), max(t.alpha for t in per_agent))
        _, spectral_radius = mean_stability_matrix(kind, None, mu_bar, R_u)
    elif kind.is_centralized:
        fusion = _fusion_moments(spec)
        theory = centralized_theory(H, R_s, mu_bar[0], sigma_mu2[0], fusion.pi_bar, fusion.sigma_pi2)
        inputs.update(pi_bar=fusion.pi_bar, sigma_pi2=fusion.sigma_pi2, alpha_bound=theory.alpha)
        report = TheoryReport(spec.digest, kind.value, theory.msd, [theory.msd], theory.er, theory.alpha_mean)
    else:
        if kind == StrategyKind.UNIFIED:
            m = strategy.matrices
            identity = np.eye(spec.n_agents)
            A_bar = ((identity if m["A_1"] is None else m["A_1"]) @ (identity if m["A_o"] is None else m["A_o"])
                     @ (identity if m["A_2"] is None else m["A_2"]))
            C_A = np.zeros((spec.n_agents ** 2, spec.n_agents ** 2))
        else:
            A_bar, C_A = strategy.policy.moments()
        perron = perron_data(A_bar, C_A)
        C = strategy.C if kind == StrategyKind.ATC_ENLARGED else None
        theory = network_theory(H, R_s, mu_bar, sigma_mu2, perron, C)
        inputs.update(theory.inputs, c_c_diag=perron.c_c_diag)
        report = TheoryReport(spec.digest, kind.value, theory.msd, [theory.msd] * spec.n_agents, theory.er, theory.alpha)
        _, spectral_radius = mean_stability_matrix(kind, A_bar, mu_bar, R_u, C=C, matrices=strategy.matrices)

    report.spectral_radius = spectral_radius
    report.inputs = inputs
    log_action("THEORY_PREDICTED", f"kind={kind.value} msd={report.msd:.6g} alpha={report.alpha:.6g}")
    return report
