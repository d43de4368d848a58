"""Random step-size processes mu(i) and their moments.

Every process is bounded in [0, mu_ub] and i.i.d. over time. A constant
process never touches its generator, so synchronous runs consume no
step-size randomness.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from core.costs import sample_shape
from utils.errors import ConfigError, PreconditionError


@dataclass(frozen=True)
class StepSizeMoments:
    mu_bar: float
    sigma_mu2: float
    mu_x: float

    @property
    def second_moment(self) -> float:
        return self.mu_bar ** 2 + self.sigma_mu2


def _non_negative(value, field: str) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"must be a number, got {value!r}", field=field)
    if not np.isfinite(value) or value < 0:
        raise ConfigError(f"must be a finite non-negative number, got {value}", field=field)
    return value


def _probability(value, field: str) -> float:
    value = _non_negative(value, field)
    if value > 1.0:
        raise ConfigError(f"must lie in [0, 1], got {value}", field=field)
    return value


class StepSizeProcess(ABC):
    """Bounded i.i.d. step-size sequence"""

    kind = ""

    @property
    @abstractmethod
    def mu_ub(self) -> float:
        pass

    @property
    @abstractmethod
    def mean(self) -> float:
        pass

    @property
    @abstractmethod
    def variance(self) -> float:
        pass

    @abstractmethod
    def sample(self, rng: np.random.Generator, size=None):
        pass

    @abstractmethod
    def to_dict(self) -> Dict:
        pass

    @property
    def is_constant(self) -> bool:
        return self.variance == 0.0

    def moments(self) -> StepSizeMoments:
        """(mu_bar, sigma_mu2, mu_x) with mu_x = mu_bar + sigma_mu2 / mu_bar."""
        mu_bar, sigma_mu2 = self.mean, self.variance
        if mu_bar <= 0.0:
            raise PreconditionError(f"{self.kind} step size has zero mean, mu_x is undefined", invariant="positive_mean")
        return StepSizeMoments(mu_bar=mu_bar, sigma_mu2=sigma_mu2, mu_x=mu_bar + sigma_mu2 / mu_bar)

    def __repr__(self):
        fields = ", ".join(f"{k}={v}" for k, v in self.to_dict().items() if k != "type")
        return f"{type(self).__name__}({fields})"


class ConstantStepSize(StepSizeProcess):
    kind = "constant"

    def __init__(self, mu: float):
        self.mu = _non_negative(mu, "mu")

    @property
    def mu_ub(self) -> float:
        return self.mu

    @property
    def mean(self) -> float:
        return self.mu

    @property
    def variance(self) -> float:
        return 0.0

    def sample(self, rng: Optional[np.random.Generator] = None, size=None):
        if size is None:
            return self.mu
        return np.full(sample_shape(size), self.mu)

    def to_dict(self) -> Dict:
        return {"type": self.kind, "mu": self.mu}


class BernoulliStepSize(StepSizeProcess):
    """mu(i) = mu with probability p, else 0 (the agent sleeps)."""

    kind = "bernoulli"

    def __init__(self, mu: float, p: float):
        self.mu = _non_negative(mu, "mu")
        self.p = _probability(p, "p")

    @property
    def mu_ub(self) -> float:
        return self.mu

    @property
    def mean(self) -> float:
        return self.p * self.mu

    @property
    def variance(self) -> float:
        return self.p * (1.0 - self.p) * self.mu ** 2

    def sample(self, rng: np.random.Generator, size=None):
        awake = rng.random(sample_shape(size)) < self.p
        return self.mu * awake if size is not None else float(self.mu * awake)

    def to_dict(self) -> Dict:
        return {"type": self.kind, "mu": self.mu, "p": self.p}


class BetaStepSize(StepSizeProcess):
    """mu(i) / mu_ub ~ Beta(xi, zeta)."""

    kind = "beta"

    def __init__(self, mu_ub: float, xi: float, zeta: float):
        self._mu_ub = _non_negative(mu_ub, "mu_ub")
        self.xi = _non_negative(xi, "xi")
        self.zeta = _non_negative(zeta, "zeta")
        if self.xi == 0.0:
            raise ConfigError("must be positive", field="xi")
        if self.zeta == 0.0:
            raise ConfigError("must be positive", field="zeta")

    @property
    def mu_ub(self) -> float:
        return self._mu_ub

    @property
    def mean(self) -> float:
        return self.xi / (self.xi + self.zeta) * self._mu_ub

    @property
    def variance(self) -> float:
        total = self.xi + self.zeta
        return self.xi * self.zeta / (total ** 2 * (total + 1.0)) * self._mu_ub ** 2

    def sample(self, rng: np.random.Generator, size=None):
        draws = self._mu_ub * rng.beta(self.xi, self.zeta, sample_shape(size))
        return draws if size is not None else float(draws)

    def to_dict(self) -> Dict:
        return {"type": self.kind, "mu_ub": self._mu_ub, "xi": self.xi, "zeta": self.zeta}


STEP_SIZE_TYPES = {
    ConstantStepSize.kind: (ConstantStepSize, ("mu",)),
    BernoulliStepSize.kind: (BernoulliStepSize, ("mu", "p")),
    BetaStepSize.kind: (BetaStepSize, ("mu_ub", "xi", "zeta")),
}


def step_size_from_dict(data: Dict, field: str = "step_size") -> StepSizeProcess:
    """Build a process from its JSON fragment, e.g. {"type": "bernoulli", "mu": 0.1, "p": 0.5}."""
    if not isinstance(data, dict):
        raise ConfigError(f"must be an object, got {type(data).__name__}", field=field)
    kind = data.get("type", "constant")
    if kind not in STEP_SIZE_TYPES:
        raise ConfigError(f"unknown type '{kind}' (expected one of: {', '.join(STEP_SIZE_TYPES)})", field=f"{field}.type")
    cls, keys = STEP_SIZE_TYPES[kind]
    unknown = set(data) - set(keys) - {"type"}
    if unknown:
        raise ConfigError(f"unexpected keys {sorted(unknown)} for type '{kind}'", field=field)
    missing = [k for k in keys if k not in data]
    if missing:
        raise ConfigError(f"missing required key(s) {missing}", field=field)
    try:
        return cls(**{k: data[k] for k in keys})
    except ConfigError as e:
        raise ConfigError(e.reason, field=f"{field}.{e.field}" if e.field else field)
