"""Risk models with exact first/second-order information and sample oracles.

Two families are supported: the (optionally regularized) mean-square-error
cost of a linear regression model and the regularized logistic risk.
Gradients are column vectors in the sense of the update equations, i.e.
``gradient(w)`` has the shape of ``w``. The sample oracles broadcast over
leading axes, so one call serves a whole batch of runs or agents.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit

from utils.errors import ConfigError, DimensionError, PreconditionError
from utils.logger import log_action

SYMMETRY_TOL = 1e-10
SPD_RTOL = 1e-12
DEFAULT_MC_SAMPLES = 100_000


def symmetrize(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def check_spd(X, name: str = "matrix") -> np.ndarray:
    """Validate a symmetric positive-definite matrix and return it symmetrized."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != X.shape[1] or X.shape[0] == 0:
        raise ConfigError(f"must be a non-empty square matrix, got shape {X.shape}", field=name)
    if not np.all(np.isfinite(X)):
        raise ConfigError("has non-finite entries", field=name)
    if np.max(np.abs(X - X.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(X))):
        raise ConfigError("must be symmetric", field=name)
    X = symmetrize(X)
    eigenvalues = np.linalg.eigvalsh(X)
    if eigenvalues[0] <= 0 or eigenvalues[0] <= SPD_RTOL * eigenvalues[-1]:
        raise ConfigError(f"must be positive-definite (min eigenvalue {eigenvalues[0]:.3g})", field=name)
    return X


def sample_shape(size) -> Tuple[int, ...]:
    if size is None:
        return ()
    if np.isscalar(size):
        return (int(size),)
    return tuple(int(s) for s in size)


def _weight_vector(w, M: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim == 0 or w.shape[-1] != M:
        raise DimensionError(f"expected weight vectors of length {M}, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise PreconditionError("weight vector has non-finite entries", invariant="finite")
    return w


@dataclass(frozen=True, eq=False)
class RegressionSample:
    """Regressor row u and observation d."""
    u: np.ndarray
    d: np.ndarray


@dataclass(frozen=True, eq=False)
class LabelledSample:
    """Feature vector h with class label gamma in {-1, +1}."""
    h: np.ndarray
    gamma: np.ndarray

    def check_labels(self) -> None:
        if not np.all(np.abs(np.asarray(self.gamma)) == 1.0):
            raise ConfigError("labels must be +1 or -1", field="gamma")


DataSample = Union[RegressionSample, LabelledSample]


def regression_gradient(w, u, d, rho=0.0) -> np.ndarray:
    """Per-sample MSE gradient 2 u^T (u w - d) + rho w."""
    residual = np.asarray(np.sum(u * w, axis=-1) - d)
    return 2.0 * u * residual[..., None] + rho * w


def logistic_gradient(w, h, gamma, rho) -> np.ndarray:
    """Per-sample logistic gradient rho w - gamma h e^{-x} / (1 + e^{-x}), x = gamma h^T w."""
    margin = gamma * np.sum(h * w, axis=-1)
    return rho * w - np.asarray(gamma * expit(-margin))[..., None] * h


@dataclass(frozen=True)
class GradientNoiseProfile:
    """Gradient-noise description at the minimizer."""
    H: np.ndarray
    R_s: np.ndarray
    beta2: float
    sigma_s2: float

    @property
    def nu(self) -> float:
        return float(np.linalg.eigvalsh(self.H)[0])

    @property
    def delta(self) -> float:
        return float(np.linalg.eigvalsh(self.H)[-1])


@dataclass(frozen=True)
class RiskEstimate:
    value: float
    standard_error: float
    samples: int


class CostModel(ABC):
    """Risk J(w) with exact derivatives and a stochastic-gradient oracle"""

    rho: float = 0.0

    @property
    @abstractmethod
    def dim(self) -> int:
        pass

    @abstractmethod
    def evaluate(self, w) -> float:
        pass

    @abstractmethod
    def gradient(self, w) -> np.ndarray:
        pass

    @abstractmethod
    def hessian(self, w) -> np.ndarray:
        pass

    @abstractmethod
    def stochastic_gradient(self, w, sample: DataSample) -> np.ndarray:
        pass

    @abstractmethod
    def minimizer(self) -> np.ndarray:
        pass


class MseCost(CostModel):
    """J(w) = sigma_d^2 - 2 r_du^T w + w^T R_u w + (rho/2)|w|^2"""

    def __init__(self, R_u, r_du, sigma_d2: float, rho: float = 0.0):
        self.R_u = check_spd(R_u, "R_u")
        M = self.R_u.shape[0]
        self.r_du = np.asarray(r_du, dtype=float)
        if self.r_du.shape != (M,):
            raise ConfigError(f"must have length {M}, got shape {self.r_du.shape}", field="r_du")
        if not np.isfinite(sigma_d2) or sigma_d2 < 0:
            raise ConfigError(f"must be a non-negative variance, got {sigma_d2}", field="sigma_d2")
        if not np.isfinite(rho) or rho < 0:
            raise ConfigError(f"must be non-negative, got {rho}", field="rho")
        self.sigma_d2 = float(sigma_d2)
        self.rho = float(rho)

    @property
    def dim(self) -> int:
        return self.R_u.shape[0]

    def evaluate(self, w) -> float:
        w = _weight_vector(w, self.dim)
        quadratic = np.sum(w * (w @ self.R_u), axis=-1)
        return self.sigma_d2 - 2.0 * (w @ self.r_du) + quadratic + 0.5 * self.rho * np.sum(w * w, axis=-1)

    def gradient(self, w) -> np.ndarray:
        w = _weight_vector(w, self.dim)
        return 2.0 * (w @ self.R_u - self.r_du) + self.rho * w

    def hessian(self, w=None) -> np.ndarray:
        if w is not None:
            _weight_vector(w, self.dim)
        return symmetrize(2.0 * self.R_u + self.rho * np.eye(self.dim))

    def stochastic_gradient(self, w, sample: DataSample) -> np.ndarray:
        if not isinstance(sample, RegressionSample):
            raise ConfigError(f"MSE cost expects a RegressionSample, got {type(sample).__name__}", field="sample")
        w = _weight_vector(w, self.dim)
        return regression_gradient(w, np.asarray(sample.u, dtype=float), np.asarray(sample.d, dtype=float), self.rho)

    def minimizer(self) -> np.ndarray:
        return linalg.solve(self.R_u + 0.5 * self.rho * np.eye(self.dim), self.r_du, assume_a="pos")


@dataclass(frozen=True, eq=False)
class LinearRegressionModel:
    """Streaming data d = u w_o + v with Gaussian rows u ~ N(0, R_u)."""
    w_o: np.ndarray
    R_u: np.ndarray
    sigma_v2: float

    def __post_init__(self):
        w_o = np.asarray(self.w_o, dtype=float)
        if w_o.ndim != 1 or not np.all(np.isfinite(w_o)):
            raise ConfigError(f"must be a finite vector, got shape {w_o.shape}", field="w_o")
        R_u = check_spd(self.R_u, "R_u")
        if R_u.shape != (w_o.size, w_o.size):
            raise ConfigError(f"must be {w_o.size}x{w_o.size} to match w_o, got {R_u.shape}", field="R_u")
        if not np.isfinite(self.sigma_v2) or self.sigma_v2 < 0:
            raise ConfigError(f"must be a non-negative variance, got {self.sigma_v2}", field="sigma_v2")
        object.__setattr__(self, "w_o", w_o)
        object.__setattr__(self, "R_u", R_u)
        object.__setattr__(self, "sigma_v2", float(self.sigma_v2))
        object.__setattr__(self, "_chol", np.linalg.cholesky(R_u))

    @property
    def dim(self) -> int:
        return self.w_o.size

    def cost(self, rho: float = 0.0) -> MseCost:
        r_du = self.R_u @ self.w_o
        return MseCost(self.R_u, r_du, float(self.w_o @ r_du) + self.sigma_v2, rho)

    def sample(self, rng: np.random.Generator, size=None) -> RegressionSample:
        shape = sample_shape(size)
        u = rng.standard_normal(shape + (self.dim,)) @ self._chol.T
        v = np.sqrt(self.sigma_v2) * rng.standard_normal(shape)
        return RegressionSample(u=u, d=u @ self.w_o + v)


@dataclass(frozen=True, eq=False)
class LogisticDataModel:
    """Labels with P(gamma = +1) = prior and features h | gamma ~ N(gamma * mean, cov)."""
    mean: np.ndarray
    cov: np.ndarray
    prior: float = 0.5

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        if mean.ndim != 1 or not np.all(np.isfinite(mean)):
            raise ConfigError(f"must be a finite vector, got shape {mean.shape}", field="mean")
        cov = check_spd(self.cov, "cov")
        if cov.shape != (mean.size, mean.size):
            raise ConfigError(f"must be {mean.size}x{mean.size} to match mean, got {cov.shape}", field="cov")
        if not 0.0 < self.prior < 1.0:
            raise ConfigError(f"must lie in (0, 1), got {self.prior}", field="prior")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "prior", float(self.prior))
        object.__setattr__(self, "_chol", np.linalg.cholesky(cov))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def R_h(self) -> np.ndarray:
        return self.cov + np.outer(self.mean, self.mean)

    def sample(self, rng: np.random.Generator, size=None) -> LabelledSample:
        shape = sample_shape(size)
        gamma = np.where(rng.random(shape) < self.prior, 1.0, -1.0)
        h = np.asarray(gamma)[..., None] * self.mean + rng.standard_normal(shape + (self.dim,)) @ self._chol.T
        return LabelledSample(h=h, gamma=gamma)


class LogisticCost(CostModel):
    """Regularized logistic risk (rho/2)|w|^2 + E ln(1 + exp(-gamma h^T w)).

    Expectations are sample averages over a fixed evaluation set of
    ``mc_samples`` draws from ``model`` (seeded by ``mc_seed``), so risk,
    gradient and Hessian are Monte Carlo estimates of the distribution-level
    quantities. Passing ``samples`` evaluates the empirical risk of that set
    instead.
    """

    def __init__(self, rho: float, model: LogisticDataModel, mc_samples: int = DEFAULT_MC_SAMPLES, mc_seed: int = 0):
        if not np.isfinite(rho) or rho <= 0:
            raise ConfigError(f"must be positive for the logistic risk, got {rho}", field="rho")
        if int(mc_samples) < 2:
            raise ConfigError(f"needs at least 2 samples, got {mc_samples}", field="mc_samples")
        self.rho = float(rho)
        self.model = model
        self.mc_samples = int(mc_samples)
        self.mc_seed = int(mc_seed)
        self._evaluation = model.sample(np.random.default_rng(self.mc_seed), self.mc_samples)

    @property
    def dim(self) -> int:
        return self.model.dim

    @property
    def R_h(self) -> np.ndarray:
        return self.model.R_h

    def _resolve(self, samples: Optional[LabelledSample]) -> LabelledSample:
        if samples is None:
            return self._evaluation
        if not isinstance(samples, LabelledSample):
            raise ConfigError(f"logistic cost expects a LabelledSample, got {type(samples).__name__}", field="sample")
        samples.check_labels()
        return samples

    def _margins(self, w: np.ndarray, samples: LabelledSample) -> np.ndarray:
        return samples.gamma * (w @ np.asarray(samples.h).T)

    def estimate(self, w, samples: Optional[LabelledSample] = None) -> RiskEstimate:
        w = _weight_vector(w, self.dim)
        samples = self._resolve(samples)
        losses = np.logaddexp(0.0, -self._margins(w, samples))
        n = losses.shape[-1]
        value = 0.5 * self.rho * np.sum(w * w, axis=-1) + losses.mean(axis=-1)
        return RiskEstimate(value=value, standard_error=losses.std(axis=-1, ddof=1) / np.sqrt(n), samples=n)

    def evaluate(self, w, samples: Optional[LabelledSample] = None) -> float:
        return self.estimate(w, samples).value

    def gradient(self, w, samples: Optional[LabelledSample] = None) -> np.ndarray:
        w = _weight_vector(w, self.dim)
        samples = self._resolve(samples)
        weights = samples.gamma * expit(-self._margins(w, samples))
        return self.rho * w - (weights @ samples.h) / samples.h.shape[0]

    def hessian(self, w, samples: Optional[LabelledSample] = None) -> np.ndarray:
        w = _weight_vector(w, self.dim)
        if w.ndim != 1:
            raise DimensionError(f"hessian takes a single weight vector, got shape {w.shape}")
        samples = self._resolve(samples)
        margins = self._margins(w, samples)
        curvature = expit(margins) * expit(-margins)
        h = samples.h
        return symmetrize(self.rho * np.eye(self.dim) + (h * curvature[:, None]).T @ h / h.shape[0])

    def stochastic_gradient(self, w, sample: DataSample) -> np.ndarray:
        if not isinstance(sample, LabelledSample):
            raise ConfigError(f"logistic cost expects a LabelledSample, got {type(sample).__name__}", field="sample")
        sample.check_labels()
        w = _weight_vector(w, self.dim)
        return logistic_gradient(w, np.asarray(sample.h, dtype=float), np.asarray(sample.gamma, dtype=float), self.rho)

    @cached_property
    def _minimizer(self) -> np.ndarray:
        result = optimize.minimize(self.evaluate, np.zeros(self.dim), jac=self.gradient, hess=self.hessian,
                                   method="Newton-CG", options={"xtol": 1e-12, "maxiter": 200})
        grad_norm = float(np.linalg.norm(self.gradient(result.x)))
        log_action("LOGISTIC_MINIMIZER", f"iterations={result.nit} grad_norm={grad_norm:.3g}")
        if grad_norm > 1e-8:
            raise PreconditionError(f"Newton iteration stopped with gradient norm {grad_norm:.3g}", invariant="convergence")
        return result.x

    def minimizer(self) -> np.ndarray:
        return self._minimizer.copy()

    def noise_profile(self, w=None) -> GradientNoiseProfile:
        """H and R_s at ``w`` (the minimizer by default) from the evaluation set.

        beta2 and sigma_s2 form a valid bound E|s|^2 <= beta2 |w~|^2 + sigma_s2,
        obtained from the 1/4-Lipschitz sigmoid.
        """
        w = self.minimizer() if w is None else _weight_vector(w, self.dim)
        h, gamma = self._evaluation.h, self._evaluation.gamma
        per_sample = logistic_gradient(w, h, gamma, self.rho)
        centred = per_sample - per_sample.mean(axis=0)
        R_s = symmetrize(centred.T @ centred / h.shape[0])
        lipschitz = self.rho + 0.25 * np.sum(h * h, axis=-1)
        return GradientNoiseProfile(H=self.hessian(w), R_s=R_s, beta2=float(2.0 * np.mean(lipschitz ** 2)),
                                    sigma_s2=float(2.0 * np.trace(R_s)))


def noise_profile(model: Union[LinearRegressionModel, LogisticCost]) -> GradientNoiseProfile:
    """Gradient-noise moments at w_o.

    For the linear model: H = 2 R_u, R_s = 4 sigma_v^2 R_u and
    sigma_s^2 = 4 sigma_v^2 Tr(R_u). With Gaussian regressors the relative
    bound is exact: beta^2 = 4 lambda_max (Tr(R_u) + lambda_max).
    """
    if isinstance(model, LogisticCost):
        return model.noise_profile()
    R_u = model.R_u
    lam_max = float(np.linalg.eigvalsh(R_u)[-1])
    return GradientNoiseProfile(
        H=2.0 * R_u,
        R_s=4.0 * model.sigma_v2 * R_u,
        beta2=4.0 * lam_max * (float(np.trace(R_u)) + lam_max),
        sigma_s2=4.0 * model.sigma_v2 * float(np.trace(R_u)),
    )


@dataclass(frozen=True)
class NoiseBoundEstimate:
    beta2: float
    sigma_s2: float
    radii: np.ndarray
    mean_square_noise: np.ndarray


def estimate_noise_bound(model: LinearRegressionModel, rng: np.random.Generator,
                         radii: Sequence[float] = (0.0, 0.25, 0.5, 1.0, 1.5, 2.0),
                         samples: int = 200_000) -> NoiseBoundEstimate:
    """Fit E|s(w)|^2 = beta2 |w~|^2 + sigma_s2 along the worst-case direction of R_u."""
    cost = model.cost()
    direction = np.linalg.eigh(model.R_u)[1][:, -1]
    radii = np.asarray(radii, dtype=float)
    mean_square = []
    for r in radii:
        w = model.w_o - r * direction
        batch = model.sample(rng, samples)
        noise = regression_gradient(w, batch.u, batch.d) - cost.gradient(w)
        mean_square.append(np.mean(np.sum(noise * noise, axis=-1)))
    mean_square = np.asarray(mean_square)
    slope, intercept = np.polyfit(radii ** 2, mean_square, 1)
    return NoiseBoundEstimate(beta2=float(slope), sigma_s2=float(intercept), radii=radii, mean_square_noise=mean_square)


class CostBank:
    """Per-agent costs of one family stacked along an agent axis.

    Weight arrays are shaped ``(..., n, M)`` with ``n`` equal to the number of
    agents, or 1 for a shared (centralized) iterate. With ``pairwise=True``
    the result is ``(..., N, N, M)`` holding grad J_l evaluated at w_k in
    position ``[..., l, k, :]``.
    """

    def __init__(self, costs: Sequence[CostModel]):
        costs = list(costs)
        if not costs:
            raise ConfigError("at least one agent is required", field="agents")
        family = type(costs[0])
        if any(type(c) is not family for c in costs):
            raise ConfigError("all agents must share one cost family", field="agents")
        M = costs[0].dim
        if any(c.dim != M for c in costs):
            raise DimensionError("all agents must share the parameter dimension")
        self.costs: List[CostModel] = costs
        self.family = "mse" if family is MseCost else "logistic"
        self.n_agents = len(costs)
        self.dim = M
        self.rho = np.array([c.rho for c in costs], dtype=float)[:, None]
        if self.family == "mse":
            self._R = np.stack([c.R_u for c in costs])
            self._r = np.stack([c.r_du for c in costs])

    def stochastic_gradient(self, w: np.ndarray, sample: DataSample, pairwise: bool = False) -> np.ndarray:
        rho = self.rho[:, None] if pairwise else self.rho
        if pairwise:
            w = w[..., None, :, :]
        if self.family == "mse":
            u, d = sample.u, sample.d
            if pairwise:
                u, d = u[..., :, None, :], d[..., :, None]
            return regression_gradient(w, u, d, rho)
        h, gamma = sample.h, sample.gamma
        if pairwise:
            h, gamma = h[..., :, None, :], gamma[..., :, None]
        return logistic_gradient(w, h, gamma, rho)

    def gradient(self, w: np.ndarray, pairwise: bool = False) -> np.ndarray:
        if self.family == "mse":
            R, r, rho = self._R, self._r, self.rho
            if pairwise:
                R, r, rho, w = R[:, None], r[:, None, :], rho[:, None], w[..., None, :, :]
            return 2.0 * ((R @ w[..., None])[..., 0] - r) + rho * w
        if pairwise:
            return np.stack([cost.gradient(w) for cost in self.costs], axis=-3)
        shared = w.shape[-2] == 1
        return np.stack([cost.gradient(w[..., 0 if shared else k, :]) for k, cost in enumerate(self.costs)], axis=-2)

    def hessians(self, w_o: np.ndarray) -> np.ndarray:
        return np.stack([cost.hessian(w_o) for cost in self.costs])
