"""Experiment configuration: parsing, validation and normalisation.

A config is a JSON object (see ``schema/experiment.schema.json``). Parsing
expands per-agent shorthands, fills defaults and resolves the topology to
an explicit matrix. The resulting normalised dict is what the digest is
computed from, so two configs that mean the same experiment share a
digest. Agent indices are 0-based.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from config import config
from core.costs import (CostBank, GradientNoiseProfile, LinearRegressionModel, LogisticCost, LogisticDataModel,
                        MseCost, noise_profile, DEFAULT_MC_SAMPLES)
from core.stepsize import StepSizeProcess, step_size_from_dict
from core.strategies import FusionSampler, Strategy, neighborhood_uniform_C
from core.topology import (CombinationPolicy, OnOffCombinationPolicy, StaticCombinationPolicy, build_graph,
                           combination_matrix, require_left_stochastic, uniform_weights)
from utils.digest import config_digest
from utils.errors import ConfigError
from utils.kind import StrategyKind
from utils.logger import log_action
from utils.seeding import parse_seed

TOP_LEVEL_KEYS = {"name", "seed", "runs", "iterations", "window", "dimension", "w_o", "agents", "strategy"}
AGENT_GROUP_KEYS = {"count"}
MSE_KEYS = {"cost", "R_u", "sigma_v2", "rho"}
LOGISTIC_KEYS = {"cost", "rho", "mean", "cov", "prior", "mc_samples", "mc_seed"}
STRATEGY_KEYS = {"kind", "step_size", "gradient", "topology", "links", "fusion", "matrices", "C", "initial"}
TOPOLOGY_KEYS = {"matrix", "graph", "rule", "p", "graph_seed", "type"}
LINK_KEYS = {"q", "overrides"}
OVERRIDE_KEYS = {"from", "to", "p"}
FUSION_KEYS = {"q"}
MATRIX_SLOTS = {"A_o", "A_1", "A_2"}

DEFAULT_RUNS = 20


def _check_keys(data: Dict, allowed, where: str) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unexpected key(s) {unknown}", field=where)


def _number(value, where: str, minimum: Optional[float] = None, strict: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"must be a number, got {value!r}", field=where)
    value = float(value)
    if not np.isfinite(value):
        raise ConfigError("must be finite", field=where)
    if minimum is not None and (value < minimum or (strict and value == minimum)):
        raise ConfigError(f"must be {'>' if strict else '>='} {minimum}, got {value}", field=where)
    return value


def _integer(value, where: str, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"must be an integer, got {value!r}", field=where)
    if value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}", field=where)
    return value


def _array(value, where: str) -> np.ndarray:
    try:
        array = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError("must be a number or a (nested) list of numbers", field=where)
    if not np.all(np.isfinite(array)):
        raise ConfigError("has non-finite entries", field=where)
    return array


def as_matrix(value, M: int, where: str) -> np.ndarray:
    """Scalar c means c * I_M; otherwise an M x M nested list."""
    array = _array(value, where)
    if array.ndim == 0:
        return float(array) * np.eye(M)
    if array.shape != (M, M):
        raise ConfigError(f"must be a scalar or a {M}x{M} matrix, got shape {array.shape}", field=where)
    return array


def as_vector(value, M: int, where: str) -> np.ndarray:
    array = _array(value, where)
    if array.ndim == 0:
        return np.full(M, float(array))
    if array.shape != (M,):
        raise ConfigError(f"must have length {M}, got shape {array.shape}", field=where)
    return array


@dataclass
class AgentModel:
    """One agent: its risk and the stream that generates its data."""
    cost: Union[MseCost, LogisticCost]
    data: Union[LinearRegressionModel, LogisticDataModel]

    def noise_profile(self) -> GradientNoiseProfile:
        if isinstance(self.cost, LogisticCost):
            return self.cost.noise_profile()
        return noise_profile(self.data)


@dataclass
class ExperimentSpec:
    name: str
    seed: int
    runs: int
    iterations: Optional[int]
    window: Optional[int]
    agents: List[AgentModel]
    strategy: Strategy
    initial: np.ndarray
    normalized: Dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def dim(self) -> int:
        return self.strategy.bank.dim

    @property
    def family(self) -> str:
        return self.strategy.bank.family

    @property
    def w_o(self) -> np.ndarray:
        """Common minimizer the errors are measured against."""
        if self.family == "mse":
            return self.agents[0].data.w_o
        return self.agents[0].cost.minimizer()

    @property
    def digest(self) -> str:
        return config_digest(self.normalized)

    def noise_profiles(self) -> List[GradientNoiseProfile]:
        if self.family == "logistic":
            return [self.agents[0].noise_profile()] * self.n_agents
        return [agent.noise_profile() for agent in self.agents]

    def with_overrides(self, **changes) -> "ExperimentSpec":
        """Re-parse the normalised config with top-level fields replaced."""
        data = dict(self.normalized)
        data.update(changes)
        return parse_experiment(data, seed=data.get("seed"))


def resolve_seed(flag=None, configured=None) -> int:
    """--seed flag, then the config's "seed", then ASYNCNET_SEED, then 0."""
    for value, source in ((flag, "--seed"), (configured, "seed")):
        try:
            seed = parse_seed(value, source)
        except ValueError as e:
            raise ConfigError(str(e), field=source)
        if seed is not None:
            return seed
    try:
        seed = config.seed_fallback()
    except ValueError as e:
        raise ConfigError(str(e), field="ASYNCNET_SEED")
    return 0 if seed is None else seed


def _expand_agents(raw) -> List[Dict]:
    if isinstance(raw, list):
        if not raw:
            raise ConfigError("needs at least one agent", field="agents")
        return [dict(a) if isinstance(a, dict) else _bad_agent(i) for i, a in enumerate(raw)]
    if not isinstance(raw, dict) or "count" not in raw:
        raise ConfigError('must be a list of agents or an object with "count"', field="agents")
    N = _integer(raw["count"], "agents.count", 1)
    shared = {k: v for k, v in raw.items() if k != "count"}
    agents = [{} for _ in range(N)]
    for key, value in shared.items():
        per_agent = _is_per_agent(key, value)
        if per_agent and len(value) != N:
            raise ConfigError(f"per-agent list has {len(value)} entries for {N} agents", field=f"agents.{key}")
        for k in range(N):
            agents[k][key] = value[k] if per_agent else value
    return agents


def _bad_agent(index: int):
    raise ConfigError("must be an object", field=f"agents[{index}]")


def _is_per_agent(key: str, value) -> bool:
    if not isinstance(value, list):
        return False
    try:
        depth = np.ndim(value)
    except (TypeError, ValueError):
        raise ConfigError("nested lists must be rectangular", field=f"agents.{key}")
    return (key in ("sigma_v2", "rho", "prior", "mc_samples", "mc_seed") and depth == 1) or (key == "R_u" and depth == 3)


def _parse_mse_agent(data: Dict, M: int, w_o: np.ndarray, where: str):
    _check_keys(data, MSE_KEYS, where)
    if "R_u" not in data or "sigma_v2" not in data:
        raise ConfigError('MSE agents need "R_u" and "sigma_v2"', field=where)
    R_u = as_matrix(data["R_u"], M, f"{where}.R_u")
    sigma_v2 = _number(data["sigma_v2"], f"{where}.sigma_v2", 0.0)
    rho = _number(data.get("rho", 0.0), f"{where}.rho", 0.0)
    if rho != 0.0:
        raise ConfigError("regularized MSE agents do not share the data model's minimizer; use rho = 0", field=f"{where}.rho")
    try:
        model = LinearRegressionModel(w_o=w_o, R_u=R_u, sigma_v2=sigma_v2)
    except ConfigError as e:
        raise ConfigError(e.reason, field=f"{where}.{e.field}" if e.field else where)
    normalized = {"cost": "mse", "R_u": R_u, "sigma_v2": sigma_v2, "rho": 0.0}
    return AgentModel(cost=model.cost(), data=model), normalized


def _parse_logistic_agent(data: Dict, M: int, where: str):
    _check_keys(data, LOGISTIC_KEYS, where)
    for key in ("rho", "mean", "cov"):
        if key not in data:
            raise ConfigError(f'logistic agents need "{key}"', field=where)
    normalized = {
        "cost": "logistic",
        "rho": _number(data["rho"], f"{where}.rho", 0.0, strict=True),
        "mean": as_vector(data["mean"], M, f"{where}.mean"),
        "cov": as_matrix(data["cov"], M, f"{where}.cov"),
        "prior": _number(data.get("prior", 0.5), f"{where}.prior", 0.0, strict=True),
        "mc_samples": _integer(data.get("mc_samples", DEFAULT_MC_SAMPLES), f"{where}.mc_samples", 2),
        "mc_seed": _integer(data.get("mc_seed", 0), f"{where}.mc_seed", 0),
    }
    return normalized


def _parse_agents(raw, M: int, w_o: np.ndarray):
    expanded = _expand_agents(raw)
    families = {a.get("cost", "mse") for a in expanded}
    if not families <= {"mse", "logistic"}:
        raise ConfigError(f"unknown cost family {sorted(families - {'mse', 'logistic'})}", field="agents.cost")
    if len(families) > 1:
        raise ConfigError("all agents must share one cost family", field="agents.cost")
    if families == {"mse"}:
        parsed = [_parse_mse_agent(a, M, w_o, f"agents[{k}]") for k, a in enumerate(expanded)]
        return [p[0] for p in parsed], [p[1] for p in parsed]
    normalized = [_parse_logistic_agent(a, M, f"agents[{k}]") for k, a in enumerate(expanded)]
    if any(config_digest(n) != config_digest(normalized[0]) for n in normalized[1:]):
        raise ConfigError("logistic agents must be identical so that they share one minimizer", field="agents")
    first = normalized[0]
    try:
        data_model = LogisticDataModel(mean=first["mean"], cov=first["cov"], prior=first["prior"])
    except ConfigError as e:
        raise ConfigError(e.reason, field=f"agents[0].{e.field}" if e.field else "agents[0]")
    cost = LogisticCost(first["rho"], data_model, first["mc_samples"], first["mc_seed"])
    return [AgentModel(cost=cost, data=data_model) for _ in normalized], normalized


def _parse_step_sizes(raw, kind: StrategyKind, N: int) -> List[StepSizeProcess]:
    if raw is None:
        raise ConfigError("is required", field="strategy.step_size")
    if kind.is_centralized:
        if not isinstance(raw, dict):
            raise ConfigError("centralized strategies take a single step-size object", field="strategy.step_size")
        return [step_size_from_dict(raw, "strategy.step_size")]
    if isinstance(raw, dict):
        return [step_size_from_dict(raw, "strategy.step_size") for _ in range(N)]
    if not isinstance(raw, list) or len(raw) != N:
        raise ConfigError(f"must be an object or a list of {N} objects", field="strategy.step_size")
    return [step_size_from_dict(item, f"strategy.step_size[{k}]") for k, item in enumerate(raw)]


def _parse_topology(raw, N: int) -> np.ndarray:
    where = "strategy.topology"
    if isinstance(raw, (list, np.ndarray)):
        return require_left_stochastic(_array(raw, where), where)
    if not isinstance(raw, dict):
        raise ConfigError("must be a matrix or an object", field=where)
    _check_keys(raw, TOPOLOGY_KEYS, where)
    if "matrix" in raw:
        return require_left_stochastic(_array(raw["matrix"], f"{where}.matrix"), f"{where}.matrix")
    if raw.get("type") == "uniform":
        return uniform_weights(N)
    if "graph" in raw:
        p = raw.get("p")
        p = None if p is None else _number(p, f"{where}.p", 0.0, strict=True)
        graph_seed = raw.get("graph_seed")
        graph_seed = None if graph_seed is None else _integer(graph_seed, f"{where}.graph_seed", 0)
        try:
            graph = build_graph(str(raw["graph"]), N, p=p, seed=graph_seed)
            return combination_matrix(graph, str(raw.get("rule", "metropolis")))
        except ConfigError as e:
            raise ConfigError(e.reason, field=f"{where}.{e.field}" if e.field else where)
    raise ConfigError('needs "matrix", "graph" or "type": "uniform"', field=where)


def _parse_links(raw, nominal: np.ndarray) -> np.ndarray:
    where = "strategy.links"
    if not isinstance(raw, dict):
        raise ConfigError("must be an object", field=where)
    _check_keys(raw, LINK_KEYS, where)
    N = nominal.shape[0]
    q = raw.get("q", 1.0)
    if isinstance(q, (list, np.ndarray)):
        q = as_matrix(q, N, f"{where}.q").copy()
        if np.any(q < 0):
            raise ConfigError("link probabilities must lie in [0, 1]", field=f"{where}.q")
    else:
        q = np.full((N, N), _number(q, f"{where}.q", 0.0))
    for i, override in enumerate(raw.get("overrides", [])):
        at = f"{where}.overrides[{i}]"
        if not isinstance(override, dict):
            raise ConfigError("must be an object", field=at)
        _check_keys(override, OVERRIDE_KEYS, at)
        if not {"from", "to", "p"} <= set(override):
            raise ConfigError('needs "from", "to" and "p"', field=at)
        l = _integer(override["from"], f"{at}.from", 0)
        k = _integer(override["to"], f"{at}.to", 0)
        if l >= N or k >= N or l == k or nominal[l, k] <= 0:
            raise ConfigError(f"({l}, {k}) is not a link of the topology", field=at)
        q[l, k] = _number(override["p"], f"{at}.p", 0.0)
    if np.any(q > 1.0):
        raise ConfigError("link probabilities must lie in [0, 1]", field=where)
    off_diagonal = (nominal > 0) & ~np.eye(N, dtype=bool)
    return np.where(off_diagonal, q, 0.0)


def _parse_C(raw, A_bar: np.ndarray, N: int) -> np.ndarray:
    if raw is None or (isinstance(raw, str) and raw == "identity"):
        return np.eye(N)
    if isinstance(raw, str) and raw == "uniform":
        return neighborhood_uniform_C(A_bar)
    C = _array(raw, "strategy.C")
    if C.shape != (N, N):
        raise ConfigError(f"must be {N}x{N}", field="strategy.C")
    return C


def _parse_initial(raw, rows: int, M: int) -> np.ndarray:
    if raw is None:
        return np.zeros((rows, M))
    array = _array(raw, "strategy.initial")
    if array.ndim == 0 or array.shape == (M,):
        return np.broadcast_to(array, (rows, M)).copy()
    if array.shape != (rows, M):
        raise ConfigError(f"must be a scalar, a length-{M} vector or a {rows}x{M} matrix", field="strategy.initial")
    return array


def _parse_strategy(raw, bank: CostBank):
    if not isinstance(raw, dict):
        raise ConfigError("must be an object", field="strategy")
    _check_keys(raw, STRATEGY_KEYS, "strategy")
    try:
        kind = StrategyKind.parse(raw.get("kind"))
    except ValueError as e:
        raise ConfigError(str(e), field="strategy.kind")
    N, M = bank.n_agents, bank.dim
    gradient = raw.get("gradient", "stochastic")
    if gradient not in ("stochastic", "exact"):
        raise ConfigError(f"must be 'stochastic' or 'exact', got {gradient!r}", field="strategy.gradient")
    step_sizes = _parse_step_sizes(raw.get("step_size"), kind, N)
    normalized = {"kind": kind.value, "gradient": gradient,
                  "step_size": step_sizes[0].to_dict() if kind.is_centralized else [p.to_dict() for p in step_sizes]}

    uses_topology = kind in (StrategyKind.CONSENSUS, StrategyKind.CTA, StrategyKind.ATC, StrategyKind.ATC_ENLARGED)
    for key, allowed in (("topology", uses_topology), ("links", uses_topology),
                         ("fusion", kind == StrategyKind.CENTRALIZED_RANDOM_FUSION),
                         ("matrices", kind == StrategyKind.UNIFIED), ("C", kind == StrategyKind.ATC_ENLARGED)):
        if key in raw and not allowed:
            raise ConfigError(f"is not used by kind '{kind.value}'", field=f"strategy.{key}")

    policy: Optional[CombinationPolicy] = None
    C = None
    if uses_topology:
        if "topology" not in raw:
            raise ConfigError("is required for distributed strategies", field="strategy.topology")
        nominal = _parse_topology(raw["topology"], N)
        if nominal.shape != (N, N):
            raise ConfigError(f"must be {N}x{N} for {N} agents", field="strategy.topology")
        normalized["topology"] = nominal
        if "links" in raw:
            q = _parse_links(raw["links"], nominal)
            policy = OnOffCombinationPolicy(nominal, q)
            normalized["links"] = {"q": q}
        else:
            policy = StaticCombinationPolicy(nominal, "strategy.topology")
        if kind == StrategyKind.ATC_ENLARGED:
            C = _parse_C(raw.get("C"), policy.moments()[0], N)
            normalized["C"] = C

    fusion = None
    if kind.is_centralized:
        if kind == StrategyKind.CENTRALIZED_RANDOM_FUSION:
            spec = raw.get("fusion")
            if not isinstance(spec, dict) or "q" not in spec:
                raise ConfigError('centralized_random_fusion needs {"q": ...}', field="strategy.fusion")
            _check_keys(spec, FUSION_KEYS, "strategy.fusion")
            fusion = FusionSampler(N, "on_off", q=_number(spec["q"], "strategy.fusion.q", 0.0, strict=True))
            normalized["fusion"] = {"q": fusion.q}
        else:
            fusion = FusionSampler(N)

    matrices = None
    if kind == StrategyKind.UNIFIED:
        raw_matrices = raw.get("matrices", {})
        if not isinstance(raw_matrices, dict):
            raise ConfigError("must be an object", field="strategy.matrices")
        _check_keys(raw_matrices, MATRIX_SLOTS, "strategy.matrices")
        matrices = {slot: (None if raw_matrices.get(slot) is None
                           else _array(raw_matrices[slot], f"strategy.matrices.{slot}"))
                    for slot in sorted(MATRIX_SLOTS)}
        normalized["matrices"] = matrices

    strategy = Strategy(kind=kind, bank=bank, step_sizes=step_sizes, policy=policy, matrices=matrices, C=C,
                        fusion=fusion, exact_gradient=gradient == "exact")
    initial = _parse_initial(raw.get("initial"), strategy.state_rows, M)
    normalized["initial"] = initial
    return strategy, initial, normalized


def parse_experiment(data: Dict, seed=None, source: str = "<config>") -> ExperimentSpec:
    """Validate a config dict and build the experiment it describes."""
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object", field=source)
    _check_keys(data, TOP_LEVEL_KEYS, "<root>")
    if "agents" not in data or "strategy" not in data:
        raise ConfigError('needs "agents" and "strategy"', field="<root>")

    if data.get("dimension") is not None:
        M = _integer(data["dimension"], "dimension", 1)
    elif data.get("w_o") is not None:
        M = int(_array(data["w_o"], "w_o").size)
    else:
        raise ConfigError('needs "dimension" or "w_o"', field="<root>")
    w_o = np.ones(M) / np.sqrt(M) if data.get("w_o") is None else as_vector(data["w_o"], M, "w_o")

    agents, normalized_agents = _parse_agents(data["agents"], M, w_o)
    bank = CostBank([agent.cost for agent in agents])
    strategy, initial, normalized_strategy = _parse_strategy(data["strategy"], bank)

    runs = _integer(data.get("runs", DEFAULT_RUNS), "runs", 1)
    iterations = data.get("iterations")
    iterations = None if iterations is None else _integer(iterations, "iterations", 2)
    window = data.get("window")
    window = None if window is None else _integer(window, "window", 2)
    if window is not None and iterations is not None and window >= iterations:
        raise ConfigError(f"must be smaller than iterations ({iterations}), got {window}", field="window")

    resolved_seed = resolve_seed(seed, data.get("seed"))
    normalized = {
        "name": str(data.get("name", "experiment")),
        "seed": resolved_seed,
        "runs": runs,
        "iterations": iterations,
        "window": window,
        "dimension": M,
        "w_o": w_o if bank.family == "mse" else None,
        "agents": normalized_agents,
        "strategy": normalized_strategy,
    }
    spec = ExperimentSpec(name=normalized["name"], seed=resolved_seed, runs=runs, iterations=iterations, window=window,
                          agents=agents, strategy=strategy, initial=initial, normalized=normalized)
    log_action("EXPERIMENT_PARSED", f"name={spec.name} kind={strategy.kind.value} N={spec.n_agents} M={M} "
                                    f"digest={spec.digest[:12]}")
    return spec


def load_experiment(path, seed=None) -> ExperimentSpec:
    """Read and parse a JSON config file; syntax errors carry file:line:col."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror or e}", field=str(path))
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, field=f"{path}:{e.lineno}:{e.colno}")
    return parse_experiment(data, seed=seed, source=str(path))
