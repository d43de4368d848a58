"""Learning recursions: single agent, centralized, consensus and diffusion.

All network strategies are special cases of one three-matrix recursion

    phi = A_1^T w
    psi = A_o^T phi - mu * grad(phi)
    w   = A_2^T psi

where a missing matrix stands for the identity. Iterates are stacked as
``(..., N, M)`` arrays so one call advances every agent of every run in a
batch. Centralized iterates use a single row, ``(..., 1, M)``.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import stats

from core.costs import CostBank, CostModel, DataSample, LabelledSample, RegressionSample
from core.stepsize import StepSizeProcess
from core.topology import (CombinationPolicy, is_strongly_connected, require_left_stochastic,
                           second_eigenvalue_modulus, validate_doubly_stochastic, validate_right_stochastic)
from utils.errors import ConfigError, DivergenceError, PreconditionError
from utils.kind import StrategyKind

DIVERGENCE_THRESHOLD = 1e12
SIMPLEX_TOL = 1e-12

# Which slot of the unified recursion carries the combination matrix
KIND_SLOTS = {
    StrategyKind.CONSENSUS: "A_o",
    StrategyKind.CTA: "A_1",
    StrategyKind.ATC: "A_2",
    StrategyKind.ATC_ENLARGED: "A_2",
}

GradientFn = Callable[[np.ndarray], np.ndarray]


def combine(A: Optional[np.ndarray], w: np.ndarray) -> np.ndarray:
    """w_k <- sum_l a[l, k] w_l for every agent k."""
    if A is None:
        return w
    return np.swapaxes(A, -1, -2) @ w


def advance(w: np.ndarray, mu: np.ndarray, gradient: GradientFn,
            A_o: Optional[np.ndarray] = None, A_1: Optional[np.ndarray] = None,
            A_2: Optional[np.ndarray] = None) -> np.ndarray:
    phi = combine(A_1, w)
    psi = combine(A_o, phi) - mu[..., None] * gradient(phi)
    return combine(A_2, psi)


def diverged(w: np.ndarray, threshold: float = DIVERGENCE_THRESHOLD) -> np.ndarray:
    """Per-row divergence flags; NaN iterates count as diverged."""
    return ~(np.sum(w * w, axis=-1) <= threshold ** 2)


def _guard(w: np.ndarray, iteration: int, threshold: float = DIVERGENCE_THRESHOLD) -> np.ndarray:
    flags = np.atleast_1d(diverged(w, threshold))
    if flags.any():
        agents = np.flatnonzero(flags.reshape(-1)) if w.ndim > 1 else ()
        raise DivergenceError(iteration, agents, float(np.sqrt(np.max(np.nan_to_num(np.sum(w * w, axis=-1), nan=np.inf)))))
    return w


def gradient_oracle(bank: CostBank, sample: Optional[DataSample], exact: bool = False,
                    pairwise: bool = False) -> GradientFn:
    """Gradient evaluator at given iterates: exact, or from one data sample per agent."""
    if exact:
        return lambda w: bank.gradient(w, pairwise=pairwise)
    if sample is None:
        raise ConfigError("stochastic gradients need a data sample", field="sample")
    return lambda w: bank.stochastic_gradient(w, sample, pairwise=pairwise)


def aggregate(C: np.ndarray, pairwise_gradients: np.ndarray) -> np.ndarray:
    """sum_l c[l, k] grad J_l(w_k) for every agent k."""
    return np.einsum("lk,...lkm->...km", C, pairwise_gradients)


def fuse(pi: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """sum_k pi_k grad J_k(w) as a single (..., 1, M) row."""
    return np.einsum("...k,...km->...m", pi, gradients)[..., None, :]


def check_simplex(pi: np.ndarray, tol: float = SIMPLEX_TOL) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if np.any(pi < -tol) or np.any(np.abs(pi.sum(axis=-1) - 1.0) > tol):
        raise PreconditionError("fusion weights must be nonnegative and sum to 1", invariant="simplex")
    return pi


# Single-step operations

def step_single(cost: CostModel, w: np.ndarray, proc: StepSizeProcess, sample: DataSample,
                rng: np.random.Generator, iteration: int = 0) -> np.ndarray:
    """w <- w - mu(i) * stochastic gradient at w."""
    mu = proc.sample(rng)
    return _guard(w - mu * cost.stochastic_gradient(w, sample), iteration)


def step_centralized(bank: CostBank, w: np.ndarray, proc: StepSizeProcess, fusion: "FusionSampler",
                     sample: Optional[DataSample], rng: np.random.Generator, exact: bool = False,
                     iteration: int = 0) -> np.ndarray:
    """w <- w - mu(i) * sum_k pi_k(i) grad J_k(w), with mu(i) drawn before pi(i)."""
    mu = proc.sample(rng)
    pi = check_simplex(fusion.sample(rng))
    gradients = gradient_oracle(bank, sample, exact)(np.asarray(w, dtype=float)[None, :])
    return _guard(w - mu * fuse(pi, gradients)[0], iteration)


def step_network(kind: StrategyKind, bank: CostBank, w: np.ndarray, A: np.ndarray, mu: np.ndarray,
                 sample: Optional[DataSample], exact: bool = False, iteration: int = 0) -> np.ndarray:
    """One consensus, CTA or ATC iteration with the realization A shared by all agents."""
    kind = StrategyKind.parse(kind)
    if kind not in (StrategyKind.CONSENSUS, StrategyKind.CTA, StrategyKind.ATC):
        raise ConfigError(f"step_network handles consensus, cta and atc, not {kind.value}", field="kind")
    slots = {KIND_SLOTS[kind]: np.asarray(A, dtype=float)}
    return _guard(advance(w, np.asarray(mu, dtype=float), gradient_oracle(bank, sample, exact), **slots), iteration)


def step_unified(w: np.ndarray, A_o: Optional[np.ndarray], A_1: Optional[np.ndarray], A_2: Optional[np.ndarray],
                 bank: CostBank, mu: np.ndarray, sample: Optional[DataSample], exact: bool = False,
                 iteration: int = 0) -> np.ndarray:
    return _guard(advance(w, np.asarray(mu, dtype=float), gradient_oracle(bank, sample, exact),
                          A_o=A_o, A_1=A_1, A_2=A_2), iteration)


def step_atc_enlarged(w: np.ndarray, A: np.ndarray, C: np.ndarray, bank: CostBank, mu: np.ndarray,
                      sample: Optional[DataSample], exact: bool = False, iteration: int = 0) -> np.ndarray:
    """ATC whose adaptation step uses sum_l c[l, k] grad J_l(w_k)."""
    report = validate_right_stochastic(C)
    if not report:
        raise ConfigError("not right-stochastic: " + "; ".join(report.violations), field="C")
    pairwise = gradient_oracle(bank, sample, exact, pairwise=True)
    return _guard(advance(w, np.asarray(mu, dtype=float), lambda phi: aggregate(C, pairwise(phi)), A_2=A), iteration)


def consensus_average(values: np.ndarray, A: np.ndarray, iterations: int) -> np.ndarray:
    """Repeated convex combining; every agent tends to the network mean at rate |lambda_2|^i."""
    A = np.asarray(A, dtype=float)
    report = validate_doubly_stochastic(A)
    if not report:
        raise PreconditionError("averaging needs a doubly stochastic matrix: " + "; ".join(report.violations),
                                invariant="simplex")
    if second_eigenvalue_modulus(A) >= 1.0 - 1e-12:
        raise PreconditionError("second eigenvalue has unit modulus, averaging cannot converge", invariant="primitive")
    values = np.asarray(values, dtype=float)
    state = values if values.ndim > 1 else values[:, None]
    for _ in range(int(iterations)):
        state = combine(A, state)
    return state if values.ndim > 1 else state[:, 0]


@dataclass(frozen=True)
class FusionMoments:
    pi_bar: np.ndarray
    sigma_pi2: np.ndarray
    c_pi: np.ndarray


class FusionSampler:
    """Random fusion weights pi(i) on the simplex.

    Schemes: ``uniform`` (pi = 1/N every time), ``fixed`` (given weights) and
    ``on_off`` (agent k reports with probability q, pi_k = b_k / sum_j b_j,
    redrawn when nobody reports).
    """

    SCHEMES = ("uniform", "fixed", "on_off")

    def __init__(self, n_agents: int, scheme: str = "uniform", q: float = 1.0,
                 weights: Optional[Sequence[float]] = None):
        if scheme not in self.SCHEMES:
            raise ConfigError(f"unknown scheme '{scheme}' (expected one of: {', '.join(self.SCHEMES)})", field="fusion")
        if not 0.0 < q <= 1.0:
            raise ConfigError(f"must lie in (0, 1], got {q}", field="fusion.q")
        self.n_agents = int(n_agents)
        self.scheme = scheme
        self.q = float(q)
        if scheme == "fixed":
            self.weights = check_simplex(np.asarray(weights, dtype=float))
            if self.weights.shape != (self.n_agents,):
                raise ConfigError(f"needs {self.n_agents} weights", field="fusion.weights")
        else:
            self.weights = np.full(self.n_agents, 1.0 / self.n_agents)

    @property
    def is_random(self) -> bool:
        return self.scheme == "on_off" and self.q < 1.0

    def sample(self, rng: Optional[np.random.Generator] = None, size: Optional[int] = None) -> np.ndarray:
        shape = () if size is None else (int(size),)
        if not self.is_random:
            return np.broadcast_to(self.weights, shape + (self.n_agents,)).copy()
        reports = rng.random(shape + (self.n_agents,)) < self.q
        empty = ~reports.any(axis=-1)
        while np.any(empty):
            reports[empty] = rng.random((int(np.count_nonzero(empty)), self.n_agents)) < self.q
            empty = ~reports.any(axis=-1)
        return reports / reports.sum(axis=-1, keepdims=True)

    def exact_moments(self) -> FusionMoments:
        """Closed-form moments; for on_off, var(pi_k) = E[1/S | S >= 1] / N - 1/N^2 with S ~ Bin(N, q)."""
        N = self.n_agents
        if not self.is_random:
            return FusionMoments(self.weights.copy(), np.zeros(N), np.zeros((N, N)))
        counts = np.arange(1, N + 1)
        pmf = stats.binom.pmf(counts, N, self.q)
        inverse_mean = np.sum(pmf / counts) / pmf.sum()
        variance = inverse_mean / N - 1.0 / N ** 2
        c_pi = np.full((N, N), -variance / (N - 1)) if N > 1 else np.zeros((1, 1))
        np.fill_diagonal(c_pi, variance)
        return FusionMoments(np.full(N, 1.0 / N), np.full(N, variance), c_pi)

    def measure(self, rng: np.random.Generator, draws: int = 200_000) -> FusionMoments:
        """Empirical moments of the sampler; rows of c_pi sum to zero."""
        samples = self.sample(rng, draws)
        pi_bar = samples.mean(axis=0)
        centred = samples - pi_bar
        c_pi = centred.T @ centred / draws
        return FusionMoments(pi_bar, np.diag(c_pi).copy(), c_pi)

    def to_dict(self):
        data = {"scheme": self.scheme, "q": self.q}
        if self.scheme == "fixed":
            data["weights"] = self.weights.tolist()
        return data


def neighborhood_uniform_C(A_bar: np.ndarray) -> np.ndarray:
    """Right-stochastic C spreading agent l's gradient evenly over the agents that listen to l."""
    listeners = np.asarray(A_bar) > 0
    return listeners / listeners.sum(axis=1, keepdims=True)


@dataclass
class Strategy:
    """Everything needed to advance one recursion, batched over runs."""
    kind: StrategyKind
    bank: CostBank
    step_sizes: List[StepSizeProcess]
    policy: Optional[CombinationPolicy] = None
    matrices: Optional[dict] = None
    C: Optional[np.ndarray] = None
    fusion: Optional[FusionSampler] = None
    exact_gradient: bool = False
    _static: Optional[np.ndarray] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.kind = StrategyKind.parse(self.kind)
        N = self.bank.n_agents
        expected = 1 if self.kind.is_centralized else N
        if len(self.step_sizes) != expected:
            raise ConfigError(f"{self.kind.value} needs {expected} step-size process(es), got {len(self.step_sizes)}",
                              field="strategy.step_size")
        if self.kind == StrategyKind.CENTRALIZED_SYNC and not self.step_sizes[0].is_constant:
            raise ConfigError("centralized_sync requires a constant step size", field="strategy.step_size")
        if self.kind.is_centralized and self.fusion is None:
            self.fusion = FusionSampler(N)
        if self.kind in (StrategyKind.CENTRALIZED_SYNC, StrategyKind.CENTRALIZED_RANDOM_MU) and self.fusion.is_random:
            raise ConfigError(f"{self.kind.value} uses deterministic fusion weights", field="strategy.fusion")
        if self.kind in KIND_SLOTS:
            if self.policy is None:
                raise ConfigError(f"{self.kind.value} needs a topology", field="strategy.topology")
            if self.policy.n_agents != N:
                raise ConfigError(f"topology is {self.policy.n_agents}x{self.policy.n_agents} for {N} agents",
                                  field="strategy.topology")
            A_bar, _ = self.policy.moments()
            if not is_strongly_connected(A_bar):
                raise PreconditionError("mean graph is not strongly connected", invariant="strongly_connected")
        if self.kind == StrategyKind.ATC_ENLARGED:
            C = np.eye(N) if self.C is None else np.asarray(self.C, dtype=float)
            report = validate_right_stochastic(C)
            if not report:
                raise ConfigError("not right-stochastic: " + "; ".join(report.violations), field="strategy.C")
            A_bar, _ = self.policy.moments()
            outside = np.argwhere((C > 0) & (A_bar <= 0))
            if len(outside):
                l, k = outside[0]
                raise ConfigError(f"c[{l}, {k}] > 0 but agent {l} is not in the neighborhood of agent {k}",
                                  field="strategy.C")
            self.C = C
        if self.kind == StrategyKind.UNIFIED:
            matrices = dict(self.matrices or {})
            unknown = set(matrices) - {"A_o", "A_1", "A_2"}
            if unknown:
                raise ConfigError(f"unexpected matrices {sorted(unknown)}", field="strategy.matrices")
            self.matrices = {slot: (None if matrices.get(slot) is None
                                    else require_left_stochastic(matrices[slot], f"strategy.matrices.{slot}"))
                             for slot in ("A_o", "A_1", "A_2")}
            for slot, A in self.matrices.items():
                if A is not None and A.shape != (N, N):
                    raise ConfigError(f"must be {N}x{N}", field=f"strategy.matrices.{slot}")

    @property
    def n_agents(self) -> int:
        return self.bank.n_agents

    @property
    def state_rows(self) -> int:
        return 1 if self.kind.is_centralized else self.bank.n_agents

    @property
    def uses_combination(self) -> bool:
        return self.kind in KIND_SLOTS and self.policy.is_random

    @property
    def uses_fusion(self) -> bool:
        return self.kind.is_centralized and self.fusion.is_random

    def static_matrix(self) -> Optional[np.ndarray]:
        """The combination matrix of a deterministic policy, links with q in {0, 1} absorbed."""
        if self.kind not in KIND_SLOTS or self.policy.is_random:
            return None
        if self._static is None:
            self._static = self.policy.sample(None)
        return self._static

    def update(self, w: np.ndarray, mu: np.ndarray, sample: Optional[DataSample] = None,
               A: Optional[np.ndarray] = None, pi: Optional[np.ndarray] = None) -> np.ndarray:
        """Advance batched iterates ``w`` of shape (..., rows, M) by one iteration.

        ``mu`` has shape (..., rows); ``A`` is this iteration's combination
        realization and ``pi`` its fusion weights, when the kind uses them.
        """
        exact = self.exact_gradient
        if self.kind == StrategyKind.NCOP:
            return advance(w, mu, gradient_oracle(self.bank, sample, exact))
        if self.kind.is_centralized:
            pi = self.fusion.weights if pi is None else pi
            gradients = gradient_oracle(self.bank, sample, exact)(w)
            return w - mu[..., None] * fuse(pi, gradients)
        if self.kind == StrategyKind.UNIFIED:
            return advance(w, mu, gradient_oracle(self.bank, sample, exact), **self.matrices)
        if A is None:
            A = self.static_matrix()
        if self.kind == StrategyKind.ATC_ENLARGED:
            pairwise = gradient_oracle(self.bank, sample, exact, pairwise=True)
            return advance(w, mu, lambda phi: aggregate(self.C, pairwise(phi)), A_2=A)
        return advance(w, mu, gradient_oracle(self.bank, sample, exact), **{KIND_SLOTS[self.kind]: A})


def stack_samples(samples: Sequence[DataSample]) -> DataSample:
    """Join per-agent sample batches along a new agent axis placed before the feature axis."""
    if isinstance(samples[0], RegressionSample):
        return RegressionSample(u=np.stack([s.u for s in samples], axis=-2), d=np.stack([s.d for s in samples], axis=-1))
    return LabelledSample(h=np.stack([s.h for s in samples], axis=-2), gamma=np.stack([s.gamma for s in samples], axis=-1))
