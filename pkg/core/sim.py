"""Monte Carlo engine for learning curves and steady-state estimates.

Runs are split into fixed-size batches that depend only on the run count.
Each batch advances all of its runs together as one array. Every run draws
from its own seed streams, and batches are reduced in batch order. The
result is therefore bit-identical for any number of worker threads.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.costs import LabelledSample, RegressionSample
from core.experiment import ExperimentSpec
from core.strategies import DIVERGENCE_THRESHOLD, diverged, stack_samples
from utils.digest import to_jsonable
from utils.errors import DigestMismatchError, PreconditionError
from utils.logger import log_action
from utils.seeding import run_streams

BATCH_RUNS = 50
CHUNK_FLOATS = 2_000_000
TRANSIENT_FACTOR = 3.0
MIN_ITERATIONS = 100


@dataclass
class LearningCurve:
    """Run-averaged squared deviation per iteration."""
    agents: np.ndarray
    network: np.ndarray
    er: np.ndarray

    @property
    def iterations(self) -> int:
        return len(self.network)


@dataclass
class SteadyStateReport:
    digest: str
    kind: str
    seed: int
    runs: int
    iterations: int
    window: int
    msd: float
    msd_se: float
    msd_agents: List[float]
    msd_agents_se: List[float]
    er: float
    er_se: float
    alpha_hat: Optional[float]
    converged: bool
    diverged: bool = False
    divergence: Optional[Dict] = None

    def to_dict(self) -> Dict:
        return to_jsonable(asdict(self))


@dataclass
class _BatchResult:
    squared_error: np.ndarray
    excess_risk: np.ndarray
    window_msd: np.ndarray
    half_msd: np.ndarray
    window_er: np.ndarray
    half_er: np.ndarray
    divergence: Optional[Tuple[int, int, List[int]]] = None


def batches(runs: int, size: int = BATCH_RUNS) -> List[range]:
    return [range(start, min(start + size, runs)) for start in range(0, runs, size)]


def chunk_length(spec: ExperimentSpec, iterations: int) -> int:
    """Iterations drawn per chunk; independent of batch size and thread count."""
    N, M = spec.n_agents, spec.dim
    per_iteration = BATCH_RUNS * (N * M + N * N + 3 * N)
    return int(min(iterations, max(1, CHUNK_FLOATS // per_iteration)))


def _draw_chunk(spec: ExperimentSpec, streams, length: int):
    strategy = spec.strategy
    mu = np.stack([np.stack([proc.sample(s.step_size[k], length) for k, proc in enumerate(strategy.step_sizes)], axis=-1)
                   for s in streams], axis=1)
    A = None
    if strategy.uses_combination:
        A = np.stack([strategy.policy.sample(s.combination, length) for s in streams], axis=1)
    pi = None
    if strategy.uses_fusion:
        pi = np.stack([strategy.fusion.sample(s.combination, length) for s in streams], axis=1)
    sample = None
    if not strategy.exact_gradient:
        per_run = [stack_samples([agent.data.sample(s.data[k], length) for k, agent in enumerate(spec.agents)])
                   for s in streams]
        if isinstance(per_run[0], RegressionSample):
            sample = RegressionSample(u=np.stack([p.u for p in per_run], axis=1), d=np.stack([p.d for p in per_run], axis=1))
        else:
            sample = LabelledSample(h=np.stack([p.h for p in per_run], axis=1),
                                    gamma=np.stack([p.gamma for p in per_run], axis=1))
    return mu, A, pi, sample


def _at(sample, t: int):
    if sample is None:
        return None
    if isinstance(sample, RegressionSample):
        return RegressionSample(u=sample.u[t], d=sample.d[t])
    return LabelledSample(h=sample.h[t], gamma=sample.gamma[t])


def _advance_chunk(strategy, w, start, mu, A, pi, sample, hessians, w_o, threshold, window_start, half_start,
                   runs: range, result: _BatchResult) -> Optional[np.ndarray]:
    """Advance one chunk of iterations; returns None once a run diverges."""
    rows = w.shape[-2]
    for t in range(mu.shape[0]):
        i = start + t
        w = strategy.update(w, mu[t], _at(sample, t), None if A is None else A[t], None if pi is None else pi[t])
        bad = diverged(w, threshold)
        if bad.any():
            run = int(np.flatnonzero(bad.any(axis=-1))[0])
            result.divergence = (i, runs[run], [int(k) for k in np.flatnonzero(bad[run])])
            log_action("SIM_DIVERGED", f"iteration={i} run={runs[run]}")
            return None
        error = w - w_o
        squared = np.sum(error * error, axis=-1)
        er = 0.5 * np.einsum("rkm,kmn,rkn->r", error, hessians, error) / rows
        result.squared_error[i] = squared.sum(axis=0)
        result.excess_risk[i] = er.sum()
        if i >= window_start:
            result.window_msd += squared
            result.window_er += er
            if i >= half_start:
                result.half_msd += squared
                result.half_er += er
    return w


def _simulate_batch(spec: ExperimentSpec, runs: range, iterations: int, window: int, hessians: np.ndarray,
                    w_o: np.ndarray, threshold: float) -> _BatchResult:
    strategy = spec.strategy
    rows = strategy.state_rows
    n_runs = len(runs)
    streams = [run_streams(spec.seed, r, len(strategy.step_sizes), spec.n_agents) for r in runs]
    w = np.broadcast_to(spec.initial, (n_runs, rows, spec.dim)).copy()
    result = _BatchResult(squared_error=np.zeros((iterations, rows)), excess_risk=np.zeros(iterations),
                          window_msd=np.zeros((n_runs, rows)), half_msd=np.zeros((n_runs, rows)),
                          window_er=np.zeros(n_runs), half_er=np.zeros(n_runs))
    window_start, half_start = iterations - window, iterations - window // 2
    chunk = chunk_length(spec, iterations)

    for start in range(0, iterations, chunk):
        length = min(chunk, iterations - start)
        mu, A, pi, sample = _draw_chunk(spec, streams, length)
        with np.errstate(over="ignore", invalid="ignore"):
            w = _advance_chunk(strategy, w, start, mu, A, pi, sample, hessians, w_o, threshold,
                               window_start, half_start, runs, result)
        if w is None:
            return result
    log_action("SIM_BATCH_DONE", f"runs={runs.start}..{runs.stop - 1}", level=logging.DEBUG)
    return result


def _mean_se(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n = values.shape[0]
    mean = values.mean(axis=0)
    se = values.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, se


def fit_rate(curve: np.ndarray, steady_state: float) -> Optional[float]:
    """Empirical convergence factor from a log-linear fit on the transient.

    The transient ends at the first iteration t* where the curve drops below
    3x the steady-state level; the fit uses iterations 0.1 t* to 0.5 t*.
    """
    curve = np.asarray(curve, dtype=float)
    if not np.isfinite(steady_state) or steady_state < 0:
        return None
    below = np.flatnonzero(curve < TRANSIENT_FACTOR * steady_state)
    if len(below) == 0:
        return None
    t_star = int(below[0])
    lo, hi = int(0.1 * t_star), int(0.5 * t_star)
    t = np.arange(lo, hi + 1)
    excess = curve[lo:hi + 1] - steady_state
    keep = excess > 0
    if np.count_nonzero(keep) < 3:
        return None
    slope, _ = np.polyfit(t[keep], np.log(excess[keep]), 1)
    return float(np.exp(slope))


def iterations_to_reach(curve: np.ndarray, level: float) -> Optional[int]:
    """First iteration at which the curve is at or below ``level``."""
    hits = np.flatnonzero(np.asarray(curve) <= level)
    return int(hits[0]) if len(hits) else None


def default_horizon(spec: ExperimentSpec) -> int:
    """Smallest T with alpha^(3T/4) < 0.01 under the predicted rate."""
    from core.theory import predict

    alpha = predict(spec).alpha
    if not 0.0 < alpha < 1.0:
        raise PreconditionError(f"predicted convergence factor {alpha:.6g} admits no finite horizon; set iterations",
                                invariant="convergence")
    return max(MIN_ITERATIONS, int(math.ceil(4.0 / 3.0 * math.log(0.01) / math.log(alpha))))


def run_experiment(spec: ExperimentSpec, threads: int = 1,
                   threshold: float = DIVERGENCE_THRESHOLD) -> Tuple[LearningCurve, SteadyStateReport]:
    """Simulate ``spec.runs`` independent runs and estimate steady-state quantities."""
    iterations = spec.iterations or default_horizon(spec)
    window = spec.window or max(2, iterations // 4)
    if window >= iterations:
        raise PreconditionError(f"window {window} must be shorter than {iterations} iterations", invariant="dimension")
    w_o = spec.w_o
    H = np.stack([p.H for p in spec.noise_profiles()])
    hessians = H if spec.strategy.state_rows == spec.n_agents else H.mean(axis=0, keepdims=True)

    parts = batches(spec.runs)
    log_action("SIM_START", f"kind={spec.strategy.kind.value} runs={spec.runs} iterations={iterations} "
                            f"batches={len(parts)} threads={threads}")

    def work(runs: range) -> _BatchResult:
        return _simulate_batch(spec, runs, iterations, window, hessians, w_o, threshold)

    if threads <= 1 or len(parts) == 1:
        results = [work(part) for part in parts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, parts))

    squared = sum(r.squared_error for r in results) / spec.runs
    excess = sum(r.excess_risk for r in results) / spec.runs
    diverging = [r.divergence for r in results if r.divergence is not None]
    divergence = min(diverging, key=lambda d: (d[0], d[1])) if diverging else None
    if divergence is not None:
        squared[divergence[0]:] = np.nan
        excess[divergence[0]:] = np.nan
    curve = LearningCurve(agents=squared, network=squared.mean(axis=1), er=excess)

    window_msd = np.concatenate([r.window_msd for r in results]) / window
    half_msd = np.concatenate([r.half_msd for r in results]) / (window // 2)
    window_er = np.concatenate([r.window_er for r in results]) / window
    agents_mean, agents_se = _mean_se(window_msd)
    msd, msd_se = _mean_se(window_msd.mean(axis=1))
    half, half_se = _mean_se(half_msd.mean(axis=1))
    er, er_se = _mean_se(window_er)

    if divergence is not None:
        report = SteadyStateReport(spec.digest, spec.strategy.kind.value, spec.seed, spec.runs, iterations, window,
                                   float("nan"), float("nan"), [float("nan")] * squared.shape[1],
                                   [float("nan")] * squared.shape[1], float("nan"), float("nan"), None,
                                   converged=False, diverged=True,
                                   divergence={"iteration": divergence[0], "run": divergence[1], "agents": divergence[2]})
    else:
        converged = bool(abs(msd - half) < 2.0 * math.sqrt(msd_se ** 2 + half_se ** 2))
        report = SteadyStateReport(spec.digest, spec.strategy.kind.value, spec.seed, spec.runs, iterations, window,
                                   float(msd), float(msd_se), agents_mean.tolist(), agents_se.tolist(),
                                   float(er), float(er_se), fit_rate(curve.network, float(msd)), converged)
    log_action("SIM_DONE", f"msd={report.msd:.6g} diverged={report.diverged} converged={report.converged}")
    return curve, report


def equalization_check(report: SteadyStateReport) -> float:
    """max_k |MSD_k - MSD_av| / MSD_av across agents."""
    if report.diverged:
        raise PreconditionError("cannot measure the spread of a diverged report", invariant="finite")
    values = np.asarray(report.msd_agents, dtype=float)
    if values.size < 2:
        return 0.0
    average = values.mean()
    return float(np.max(np.abs(values - average)) / average)


@dataclass
class ComparisonRow:
    quantity: str
    empirical: Optional[float]
    theory: float
    relative_error: Optional[float]
    tolerance: float
    passed: Optional[bool]


@dataclass
class Comparison:
    digest: str
    comparable: bool
    rows: List[ComparisonRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.comparable and all(row.passed is not False for row in self.rows)

    def to_dict(self) -> Dict:
        data = to_jsonable(asdict(self))
        data["passed"] = self.passed
        return data


def _row(quantity: str, empirical: Optional[float], theory: float, tolerance: float) -> ComparisonRow:
    if empirical is None:
        return ComparisonRow(quantity, None, theory, None, tolerance, None)
    if theory == 0.0:
        return ComparisonRow(quantity, empirical, theory, None, tolerance, abs(empirical) <= 1e-10)
    relative = (empirical - theory) / theory
    return ComparisonRow(quantity, empirical, theory, relative, tolerance, abs(relative) <= tolerance)


def compare_theory(report: SteadyStateReport, theory, tolerance: float = 0.2, rate_tolerance: float = 0.25) -> Comparison:
    """Relative error (empirical - theory) / theory per quantity.

    The rate row compares 1 - alpha_hat with 1 - alpha. A diverged report is
    not comparable and yields no rows.
    """
    if report.digest != theory.digest:
        raise DigestMismatchError(theory.digest, report.digest)
    if report.diverged:
        return Comparison(report.digest, comparable=False)
    rows = [_row("msd", report.msd, theory.msd, tolerance)]
    if theory.er is not None:
        rows.append(_row("er", report.er, theory.er, tolerance))
    rows.append(_row("rate", None if report.alpha_hat is None else 1.0 - report.alpha_hat, 1.0 - theory.alpha,
                     rate_tolerance))
    return Comparison(report.digest, comparable=True, rows=rows)
