"""Combination policies, their moment matrices and Perron-vector machinery.

Matrices follow the left-stochastic convention: entry a[l, k] is the weight
agent k assigns to agent l, and every column sums to one. Kronecker-indexed
quantities (C_A, p_c) pair (l, k) with (n, m) at position [l*N + n, k*N + m].
"""

import itertools
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from utils.errors import ConfigError, PreconditionError
from utils.logger import log_action

STOCHASTIC_TOL = 1e-10
PERRON_TOL = 1e-12
PERRON_MAX_ITER = 1_000_000
MAX_ENUMERATED_LINKS = 16

MatrixLike = Union[np.ndarray, sparse.spmatrix]


@dataclass
class StochasticityReport:
    """Outcome of a stochasticity check with one message per violation."""
    valid: bool
    sums: np.ndarray
    violations: List[str] = field(default_factory=list)

    def __bool__(self):
        return self.valid


def _square(A, name: str = "A") -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise ConfigError(f"must be a non-empty square matrix, got shape {A.shape}", field=name)
    if not np.all(np.isfinite(A)):
        raise ConfigError("has non-finite entries", field=name)
    return A


def _check_sums(A: np.ndarray, axis: int, label: str, tol: float) -> StochasticityReport:
    sums = A.sum(axis=axis)
    violations = []
    negative = np.argwhere(A < -tol)
    for l, k in negative[:5]:
        violations.append(f"entry ({l}, {k}) is negative ({A[l, k]:.6g})")
    for idx in np.flatnonzero(np.abs(sums - 1.0) > tol):
        violations.append(f"{label} {idx} sums to {sums[idx]:.6g}, expected 1")
    return StochasticityReport(valid=not violations, sums=sums, violations=violations)


def validate_left_stochastic(A, tol: float = STOCHASTIC_TOL) -> StochasticityReport:
    """Nonnegative entries and unit column sums."""
    return _check_sums(_square(A), axis=0, label="column", tol=tol)


def validate_right_stochastic(C, tol: float = STOCHASTIC_TOL) -> StochasticityReport:
    """Nonnegative entries and unit row sums."""
    return _check_sums(_square(C, "C"), axis=1, label="row", tol=tol)


def validate_doubly_stochastic(A, tol: float = STOCHASTIC_TOL) -> StochasticityReport:
    left, right = validate_left_stochastic(A, tol), validate_right_stochastic(A, tol)
    return StochasticityReport(valid=left.valid and right.valid, sums=left.sums,
                               violations=left.violations + [v for v in right.violations if v not in left.violations])


def require_left_stochastic(A, name: str = "A", tol: float = STOCHASTIC_TOL) -> np.ndarray:
    A = _square(A, name)
    report = validate_left_stochastic(A, tol)
    if not report:
        raise ConfigError("not left-stochastic: " + "; ".join(report.violations), field=name)
    return A


def _pattern(B: MatrixLike) -> sparse.csr_matrix:
    B = sparse.csr_matrix(B, dtype=float)
    scale = abs(B).max() if B.nnz else 0.0
    return sparse.csr_matrix(B > 1e-14 * scale, dtype=np.int8) if scale > 0 else sparse.csr_matrix(B.shape, dtype=np.int8)


def _graph_primitive(pattern: sparse.csr_matrix) -> bool:
    n_components, _ = csgraph.connected_components(pattern, directed=True, connection="strong")
    if n_components != 1:
        return False
    if pattern.diagonal().any():
        return True
    dist = csgraph.shortest_path(pattern, directed=True, unweighted=True, indices=0)
    rows, cols = pattern.nonzero()
    period = 0
    for u, v in zip(rows, cols):
        period = math.gcd(period, int(dist[u] + 1 - dist[v]))
    return period == 1


def is_primitive(B: MatrixLike) -> bool:
    """True iff some power B^n with n <= (N-1)^2 + 1 is entrywise positive.

    Dense input is checked on the boolean pattern by repeated squaring up to
    the Wielandt exponent. Sparse input (the N^2 x N^2 moment matrices) is
    checked as strong connectivity plus aperiodicity of its graph.
    """
    if sparse.issparse(B):
        return _graph_primitive(_pattern(B))
    B = np.asarray(B, dtype=float)
    if np.any(B < 0):
        raise PreconditionError("primitivity is defined for nonnegative matrices", invariant="primitive")
    N = B.shape[0]
    power = (B > 0).astype(np.int64)
    exponent, bound = 1, (N - 1) ** 2 + 1
    while exponent < bound:
        power = ((power @ power) > 0).astype(np.int64)
        exponent *= 2
    return bool(power.all())


def is_strongly_connected(A: MatrixLike) -> bool:
    graph = nx.from_numpy_array((np.asarray(sparse.csr_matrix(A).todense()) > 0).astype(int), create_using=nx.DiGraph)
    return nx.is_strongly_connected(graph)


def second_eigenvalue_modulus(A) -> float:
    moduli = np.sort(np.abs(np.linalg.eigvals(np.asarray(A, dtype=float))))
    return float(moduli[-2]) if moduli.size > 1 else 0.0


def perron_vector(B: MatrixLike, tol: float = PERRON_TOL, max_iter: int = PERRON_MAX_ITER) -> np.ndarray:
    """Positive sum-one p with B p = p for a primitive left-stochastic B, by power iteration."""
    if not is_primitive(B):
        raise PreconditionError("matrix is not primitive", invariant="primitive")
    column_sums = np.asarray(B.sum(axis=0)).ravel()
    if np.max(np.abs(column_sums - 1.0)) > STOCHASTIC_TOL:
        raise PreconditionError("matrix is not left-stochastic", invariant="simplex")
    n = B.shape[0]
    p = np.full(n, 1.0 / n)
    for iteration in range(1, int(max_iter) + 1):
        nxt = B @ p
        nxt = nxt / nxt.sum()
        if np.max(np.abs(nxt - p)) < tol:
            log_action("PERRON_CONVERGED", f"size={n} iterations={iteration}", level=logging.DEBUG)
            return nxt
        p = nxt
    raise PreconditionError(f"power iteration did not converge in {max_iter} iterations", invariant="convergence")


# Weight rules and graphs

def adjacency_of(graph: nx.Graph) -> np.ndarray:
    return nx.to_numpy_array(graph, nodelist=sorted(graph.nodes()), dtype=float)


def metropolis_weights(graph: nx.Graph) -> np.ndarray:
    """Symmetric doubly stochastic weights a[l, k] = 1 / (1 + max(deg_l, deg_k))."""
    adjacency = adjacency_of(graph) > 0
    np.fill_diagonal(adjacency, False)
    degree = adjacency.sum(axis=0)
    A = np.where(adjacency, 1.0 / (1.0 + np.maximum.outer(degree, degree)), 0.0)
    np.fill_diagonal(A, 1.0 - A.sum(axis=0))
    return A


def averaging_weights(graph: nx.Graph) -> np.ndarray:
    """a[l, k] = 1 / |N_k| over the closed neighborhood of k."""
    adjacency = adjacency_of(graph) > 0
    np.fill_diagonal(adjacency, True)
    return adjacency / adjacency.sum(axis=0, keepdims=True)


def uniform_weights(n_agents: int) -> np.ndarray:
    return np.full((n_agents, n_agents), 1.0 / n_agents)


WEIGHT_RULES = {
    "metropolis": metropolis_weights,
    "averaging": averaging_weights,
}


def build_graph(kind: str, n_agents: int, p: Optional[float] = None, seed: Optional[int] = None) -> nx.Graph:
    """Undirected topology on agents 0..N-1."""
    if n_agents < 1:
        raise ConfigError(f"needs at least one agent, got {n_agents}", field="graph")
    if kind == "ring":
        return nx.cycle_graph(n_agents) if n_agents >= 3 else nx.path_graph(n_agents)
    if kind == "line":
        return nx.path_graph(n_agents)
    if kind == "star":
        return nx.star_graph(n_agents - 1)
    if kind == "complete":
        return nx.complete_graph(n_agents)
    if kind == "erdos_renyi":
        if p is None or not 0.0 < p <= 1.0:
            raise ConfigError(f"erdos_renyi needs an edge probability in (0, 1], got {p}", field="p")
        rng = np.random.default_rng(seed)
        for attempt in range(1000):
            graph = nx.erdos_renyi_graph(n_agents, p, seed=int(rng.integers(2 ** 32)))
            if nx.is_connected(graph):
                log_action("GRAPH_BUILT", f"erdos_renyi n={n_agents} p={p} attempts={attempt + 1}", level=logging.DEBUG)
                return graph
        raise PreconditionError(f"no connected erdos_renyi graph with p={p} after 1000 draws", invariant="strongly_connected")
    raise ConfigError(f"unknown graph '{kind}' (expected one of: ring, line, star, complete, erdos_renyi)", field="graph")


def combination_matrix(graph: nx.Graph, rule: str = "metropolis") -> np.ndarray:
    if rule == "uniform":
        return uniform_weights(graph.number_of_nodes())
    if rule not in WEIGHT_RULES:
        raise ConfigError(f"unknown rule '{rule}' (expected one of: metropolis, averaging, uniform)", field="rule")
    return WEIGHT_RULES[rule](graph)


# Policies

class CombinationPolicy(ABC):
    """Static or random left-stochastic combination matrix"""

    @property
    @abstractmethod
    def n_agents(self) -> int:
        pass

    @property
    @abstractmethod
    def is_random(self) -> bool:
        pass

    @abstractmethod
    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        pass

    @abstractmethod
    def moments(self) -> Tuple[np.ndarray, sparse.csr_matrix]:
        pass


class StaticCombinationPolicy(CombinationPolicy):
    def __init__(self, A, name: str = "A"):
        self.A = require_left_stochastic(A, name)

    @property
    def n_agents(self) -> int:
        return self.A.shape[0]

    @property
    def is_random(self) -> bool:
        return False

    def sample(self, rng: Optional[np.random.Generator] = None, size: Optional[int] = None) -> np.ndarray:
        if size is None:
            return self.A
        return np.broadcast_to(self.A, (size,) + self.A.shape)

    def moments(self) -> Tuple[np.ndarray, sparse.csr_matrix]:
        N = self.n_agents
        return self.A.copy(), sparse.csr_matrix((N * N, N * N))


class OnOffCombinationPolicy(CombinationPolicy):
    """Independent on-off links over a nominal matrix.

    Each off-diagonal nominal edge a[l, k] > 0 is kept with probability
    q[l, k] and dropped otherwise. The diagonal absorbs the mass of the
    dropped links, so every realization stays left-stochastic.
    """

    def __init__(self, nominal, link_probabilities: Union[float, np.ndarray] = 1.0):
        self.nominal = require_left_stochastic(nominal, "topology")
        N = self.nominal.shape[0]
        q = np.broadcast_to(np.asarray(link_probabilities, dtype=float), (N, N)).copy()
        if np.any(~np.isfinite(q)) or np.any(q < 0) or np.any(q > 1):
            raise ConfigError("link probabilities must lie in [0, 1]", field="links")
        off_diagonal = ~np.eye(N, dtype=bool)
        self.edges = np.argwhere((self.nominal > 0) & off_diagonal)
        self.q = np.where((self.nominal > 0) & off_diagonal, q, 0.0)
        self._edge_weights = self.nominal[self.edges[:, 0], self.edges[:, 1]]
        self._edge_q = self.q[self.edges[:, 0], self.edges[:, 1]]

    @property
    def n_agents(self) -> int:
        return self.nominal.shape[0]

    @property
    def is_random(self) -> bool:
        return bool(np.any((self._edge_q > 0) & (self._edge_q < 1)))

    def _assemble(self, on: np.ndarray) -> np.ndarray:
        N = self.n_agents
        A = np.zeros(on.shape[:-1] + (N, N))
        A[..., self.edges[:, 0], self.edges[:, 1]] = self._edge_weights * on
        diagonal = 1.0 - A.sum(axis=-2)
        idx = np.arange(N)
        A[..., idx, idx] = diagonal
        return A

    def sample(self, rng: Optional[np.random.Generator], size: Optional[int] = None) -> np.ndarray:
        """One realization, or ``size`` of them; rng may be None when every q is 0 or 1."""
        if not self.is_random:
            A = self._assemble(self._edge_q)
            return A if size is None else np.broadcast_to(A, (size,) + A.shape)
        shape = (len(self.edges),) if size is None else (size, len(self.edges))
        return self._assemble(rng.random(shape) < self._edge_q)

    def moments(self) -> Tuple[np.ndarray, sparse.csr_matrix]:
        """(A_bar, C_A) in closed form for independent links.

        With var_lk = q(1-q)a^2 the only nonzero covariances sit in the
        same column k: +var_lk at (lN+l, kN+k), -var_lk at (lN+k, kN+k) and
        (kN+l, kN+k), and sum_j var_jk at (kN+k, kN+k).
        """
        N = self.n_agents
        A_bar = self._assemble(self._edge_q)
        variance = self._edge_q * (1.0 - self._edge_q) * self._edge_weights ** 2
        rows, cols, values = [], [], []
        for (l, k), var in zip(self.edges, variance):
            if var == 0.0:
                continue
            column = k * N + k
            rows += [l * N + l, l * N + k, k * N + l, k * N + k]
            cols += [column] * 4
            values += [var, -var, -var, var]
        C_A = sparse.coo_matrix((values, (rows, cols)), shape=(N * N, N * N)).tocsr()
        C_A.sum_duplicates()
        return A_bar, C_A

    def enumerate(self) -> "FiniteCombinationPolicy":
        """Exact finite form over all 2^E link patterns."""
        n_links = len(self.edges)
        if n_links > MAX_ENUMERATED_LINKS:
            raise PreconditionError(f"{n_links} links are too many to enumerate (limit {MAX_ENUMERATED_LINKS})",
                                    invariant="dimension")
        patterns = np.array(list(itertools.product([False, True], repeat=n_links)), dtype=bool)
        probabilities = np.prod(np.where(patterns, self._edge_q, 1.0 - self._edge_q), axis=1)
        keep = probabilities > 0
        return FiniteCombinationPolicy(self._assemble(patterns[keep]), probabilities[keep])


class FiniteCombinationPolicy(CombinationPolicy):
    """Policy with finitely many realizations, sampled with the given probabilities."""

    def __init__(self, realizations: Sequence[np.ndarray], probabilities: Sequence[float]):
        self.realizations = np.asarray(realizations, dtype=float)
        self.probabilities = np.asarray(probabilities, dtype=float)
        if self.realizations.ndim != 3 or len(self.realizations) != len(self.probabilities):
            raise ConfigError("need one probability per N x N realization", field="realizations")
        if np.any(self.probabilities < 0) or abs(self.probabilities.sum() - 1.0) > STOCHASTIC_TOL:
            raise ConfigError("probabilities must be nonnegative and sum to 1", field="probabilities")
        for i, A in enumerate(self.realizations):
            require_left_stochastic(A, f"realizations[{i}]")

    @property
    def n_agents(self) -> int:
        return self.realizations.shape[1]

    @property
    def is_random(self) -> bool:
        return int(np.count_nonzero(self.probabilities)) > 1

    def sample(self, rng: Optional[np.random.Generator], size: Optional[int] = None) -> np.ndarray:
        if not self.is_random:
            A = self.realizations[int(np.argmax(self.probabilities))]
            return A if size is None else np.broadcast_to(A, (size,) + A.shape)
        return self.realizations[rng.choice(len(self.probabilities), size=size, p=self.probabilities)]

    def moments(self) -> Tuple[np.ndarray, sparse.csr_matrix]:
        A_bar = np.tensordot(self.probabilities, self.realizations, axes=1)
        deviations = self.realizations - A_bar
        N = self.n_agents
        C_A = np.einsum("s,slk,snm->lnkm", self.probabilities, deviations, deviations).reshape(N * N, N * N)
        return A_bar, sparse.csr_matrix(C_A)


def mean_graph(policy: CombinationPolicy) -> List[List[int]]:
    """Neighborhood N_k = {l : a_bar[l, k] > 0} of every agent k."""
    A_bar, _ = policy.moments()
    return [sorted(int(l) for l in np.flatnonzero(A_bar[:, k] > 0)) for k in range(A_bar.shape[0])]


def moment_matrix(A_bar: np.ndarray, C_A: MatrixLike) -> sparse.csr_matrix:
    """A_bar (x) A_bar + C_A, itself left-stochastic."""
    return (sparse.kron(sparse.csr_matrix(A_bar), sparse.csr_matrix(A_bar)) + sparse.csr_matrix(C_A)).tocsr()


@dataclass(frozen=True)
class PerronData:
    p_bar: np.ndarray
    p_c: np.ndarray
    P_c: np.ndarray
    C_c: np.ndarray

    @property
    def c_c_diag(self) -> np.ndarray:
        return np.diag(self.C_c).copy()

    @property
    def p_c_diag(self) -> np.ndarray:
        return np.diag(self.P_c).copy()


def perron_data(A_bar, C_A: MatrixLike, tol: float = PERRON_TOL) -> PerronData:
    """Perron vectors of A_bar and of A_bar (x) A_bar + C_A, partitioned into P_c and C_c."""
    A_bar = np.asarray(A_bar, dtype=float)
    N = A_bar.shape[0]
    K = moment_matrix(A_bar, C_A)
    if not is_primitive(K):
        raise PreconditionError("A_bar (x) A_bar + C_A is not primitive", invariant="strongly_connected")
    if not is_primitive(A_bar):
        raise PreconditionError("moment matrix is primitive but A_bar is not", invariant="primitive")
    p_bar = perron_vector(A_bar, tol)
    p_c = perron_vector(K, tol)
    P_c = p_c.reshape(N, N)
    P_c = 0.5 * (P_c + P_c.T)
    return PerronData(p_bar=p_bar, p_c=p_c, P_c=P_c, C_c=P_c - np.outer(p_bar, p_bar))
