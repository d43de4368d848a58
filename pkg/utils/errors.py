from typing import Iterable, Optional


class AsyncNetError(Exception):
    """Base class for errors raised on purpose by asyncnet"""

    exit_code = 1


class ConfigError(AsyncNetError, ValueError):
    """Invalid experiment configuration or constructor argument"""

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        self.reason = message
        super().__init__(f"{field}: {message}" if field else message)


class PreconditionError(AsyncNetError, ValueError):
    """A mathematical precondition of an operation does not hold"""

    exit_code = 3

    def __init__(self, message: str, invariant: str = "precondition"):
        self.invariant = invariant
        super().__init__(f"[{invariant}] {message}")


class DimensionError(PreconditionError):
    """Array shapes disagree with the problem dimension"""

    def __init__(self, message: str):
        super().__init__(message, invariant="dimension")


class DivergenceError(AsyncNetError, RuntimeError):
    """Iterates left the divergence guard"""

    exit_code = 4

    def __init__(self, iteration: int, agents: Iterable[int] = (), norm: float = float("inf")):
        self.iteration = int(iteration)
        self.agents = [int(k) for k in agents]
        self.norm = float(norm)
        where = f" at agents {self.agents}" if self.agents else ""
        super().__init__(f"diverged at iteration {self.iteration}{where} (|w| = {self.norm:.3g})")


class DigestMismatchError(AsyncNetError, ValueError):
    """Theory and simulation reports were produced from different configurations"""

    exit_code = 2

    def __init__(self, expected: str, found: str):
        self.expected = expected
        self.found = found
        super().__init__(f"config digest mismatch: {expected[:12]} != {found[:12]}")
