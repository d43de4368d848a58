"""Bundled scenarios that tie simulation results to the closed-form predictions."""

import argparse
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from commands.command import Command, add_thread_argument, thread_count
from components.report_writer import ReportWriter
from components.summary import SummaryBoard
from config import config
from core.experiment import parse_experiment
from core.sim import equalization_check, iterations_to_reach, run_experiment
from core.theory import break_even_variance, fusion_degradation, predict
from utils.errors import ConfigError
from utils.logger import log_action

DEMO_SEED = 2024
INSTABILITY_TOPOLOGY = [[0.05, 0.95], [0.95, 0.05]]


@dataclass
class DemoResult:
    board: SummaryBoard
    reports: Dict[str, Dict] = field(default_factory=dict)


def lms_config(name: str, kind: str, n_agents: int, step_size: Dict, sigma_v2, dimension: int = 2, runs: int = 40,
               iterations: int = 12000, window: int = 4000, **strategy) -> Dict:
    return {
        "name": name,
        "seed": DEMO_SEED,
        "runs": runs,
        "iterations": iterations,
        "window": window,
        "dimension": dimension,
        "agents": {"count": n_agents, "cost": "mse", "R_u": 1.0, "sigma_v2": sigma_v2},
        "strategy": {"kind": kind, "step_size": step_size, **strategy},
    }


def constant(mu: float) -> Dict:
    return {"type": "constant", "mu": mu}


class _Runner:
    """Parses, predicts and simulates demo configs, keeping every report"""

    def __init__(self, threads: int):
        self.threads = threads
        self.reports: Dict[str, Dict] = {}

    def run(self, label: str, data: Dict):
        spec = parse_experiment(data)
        theory = predict(spec)
        curve, report = run_experiment(spec, threads=self.threads,
                                       threshold=float(config.get("divergence_threshold")))
        self.reports[label] = {"theory": theory.to_dict(), "simulation": report.to_dict()}
        return theory, curve, report


def _relative(value: float, target: float) -> float:
    return abs(value - target) / abs(target)


def consensus_instability(threads: int) -> DemoResult:
    board = SummaryBoard("consensus-instability")
    runner = _Runner(threads)
    board.add_note(f"A_bar = {INSTABILITY_TOPOLOGY}, R_u = I, mu = 0.15")
    for kind in ("consensus", "atc", "ncop"):
        extra = {} if kind == "ncop" else {"topology": INSTABILITY_TOPOLOGY}
        data = lms_config(f"instability-{kind}", kind, 2, constant(0.15), 1e-3, runs=10, iterations=2000,
                          window=500, **extra)
        theory, _, report = runner.run(kind, data)
        board.add_note(f"{kind}: rho(B_bar) = {theory.spectral_radius:.4f}")
        if kind == "consensus":
            board.add_check("consensus is mean-unstable", theory.spectral_radius > 1.0)
            where = f"iteration {report.divergence['iteration']}" if report.diverged else "no divergence"
            board.add_check("consensus hits the divergence guard", report.diverged, where)
        else:
            board.add_check(f"{kind} is mean-stable", theory.spectral_radius < 1.0)
            board.add_check(f"{kind} converges", not report.diverged and np.isfinite(report.msd),
                            f"msd {report.msd:.4g}")
    return DemoResult(board, runner.reports)


def nfold(threads: int) -> DemoResult:
    board = SummaryBoard("nfold")
    runner = _Runner(threads)
    n_agents = 5
    ncop_theory, _, ncop = runner.run("ncop", lms_config("nfold-ncop", "ncop", n_agents, constant(0.002), 0.01))
    cent_theory, _, cent = runner.run("centralized", lms_config("nfold-centralized", "centralized_sync", n_agents,
                                                                constant(0.002), 0.01))
    predicted = cent_theory.msd / ncop_theory.msd
    ratio = cent.msd / ncop.msd
    board.add_note(f"theory: msd_cent / msd_ncop = {predicted:.4f} (1/N = {1.0 / n_agents:.4f})")
    board.add_check("centralized msd is 1/N of non-cooperative", _relative(ratio, 1.0 / n_agents) <= 0.2,
                    f"measured ratio {ratio:.4f}")
    return DemoResult(board, runner.reports)


def async_vs_sync(threads: int) -> DemoResult:
    board = SummaryBoard("async-vs-sync")
    runner = _Runner(threads)
    p = 0.5
    sync_theory, sync_curve, sync = runner.run(
        "sync", lms_config("lms-sync", "ncop", 1, constant(0.002), 0.01, dimension=5))
    _, async_curve, asynchronous = runner.run(
        "async", lms_config("lms-async", "ncop", 1, {"type": "bernoulli", "mu": 0.002, "p": p}, 0.01, dimension=5))
    target = sync_theory.msd
    board.add_note(f"theory msd = mu M sigma_v^2 = {target:.4g} for both")
    board.add_check("sync msd matches theory", _relative(sync.msd, target) <= 0.15, f"{sync.msd:.4g}")
    board.add_check("async msd matches theory", _relative(asynchronous.msd, target) <= 0.15, f"{asynchronous.msd:.4g}")
    board.add_check("steady states agree", _relative(asynchronous.msd, sync.msd) <= 0.15,
                    f"ratio {asynchronous.msd / sync.msd:.3f}")
    t_sync = iterations_to_reach(sync_curve.network, 2.0 * target)
    t_async = iterations_to_reach(async_curve.network, 2.0 * target)
    if t_sync is None or t_async is None:
        board.add_check("async needs 1/p times the iterations", False, "2x steady-state level never reached")
    else:
        board.add_check("async needs 1/p times the iterations", _relative(t_async / t_sync, 1.0 / p) <= 0.25,
                        f"{t_async} vs {t_sync} iterations (ratio {t_async / t_sync:.3f})")
    return DemoResult(board, runner.reports)


def equalization(threads: int) -> DemoResult:
    board = SummaryBoard("equalization")
    runner = _Runner(threads)
    sigma_v2 = [0.01, 0.02, 0.03, 0.04, 0.05]
    ring = {"graph": "ring", "rule": "metropolis"}
    _, _, atc = runner.run("atc", lms_config("equalization-atc", "atc", 5, constant(0.002), sigma_v2, topology=ring))
    _, _, ncop = runner.run("ncop", lms_config("equalization-ncop", "ncop", 5, constant(0.002), sigma_v2))
    target = 0.002 * 2 / 5 * float(np.mean(sigma_v2))
    board.add_note(f"centralized-equivalent msd (mu M / N) avg sigma_v^2 = {target:.4g}")
    board.add_check("diffusion matches the centralized level", _relative(atc.msd, target) <= 0.2, f"{atc.msd:.4g}")
    spread = equalization_check(atc)
    board.add_check("diffusion equalizes agents", spread < 0.15, f"spread {spread:.3f}")
    ncop_spread = equalization_check(ncop)
    board.add_check("non-cooperative agents stay unequal", ncop_spread > 0.5, f"spread {ncop_spread:.3f}")
    return DemoResult(board, runner.reports)


def async_diffusion(threads: int) -> DemoResult:
    board = SummaryBoard("async-diffusion")
    runner = _Runner(threads)
    data = lms_config("async-diffusion", "atc", 5, constant(0.002), [0.01, 0.02, 0.03, 0.04, 0.05],
                      topology={"graph": "ring", "rule": "metropolis"}, links={"q": 0.7})
    theory, _, report = runner.run("atc", data)
    board.add_note(f"on-off links with q = 0.7; p_c,kk = {np.round(theory.inputs['p_c_diag'], 4).tolist()}")
    board.add_check("network msd matches the asynchronous formula", _relative(report.msd, theory.msd) <= 0.25,
                    f"{report.msd:.4g} vs {theory.msd:.4g}")
    return DemoResult(board, runner.reports)


def random_fusion(threads: int) -> DemoResult:
    board = SummaryBoard("random-fusion")
    runner = _Runner(threads)
    n_agents = 5
    _, _, sync = runner.run("sync", lms_config("fusion-sync", "centralized_sync", n_agents, constant(0.002), 0.01))
    theory, _, fused = runner.run("random", lms_config("fusion-random", "centralized_random_fusion", n_agents,
                                                       constant(0.002), 0.01, fusion={"q": 0.5}))
    _, _, ncop = runner.run("ncop", lms_config("fusion-ncop", "ncop", n_agents, constant(0.002), 0.01))
    sigma_pi2 = float(np.mean(theory.inputs["sigma_pi2"]))
    factor = n_agents * fusion_degradation(n_agents, sigma_pi2)
    board.add_note(f"sigma_pi^2 = {sigma_pi2:.5f}, degradation 1 + N^2 sigma_pi^2 = {factor:.4f}, "
                   f"break-even sigma_pi^2 = {break_even_variance(n_agents):.4f}")
    ratio = fused.msd / sync.msd
    board.add_check("random fusion degrades by 1 + N^2 sigma_pi^2", _relative(ratio, factor) <= 0.25,
                    f"measured {ratio:.3f}")
    board.add_check("random fusion still beats non-cooperation", fused.msd < ncop.msd,
                    f"{fused.msd:.4g} vs {ncop.msd:.4g}")
    return DemoResult(board, runner.reports)


DEMOS: Dict[str, Callable[[int], DemoResult]] = {
    "consensus-instability": consensus_instability,
    "nfold": nfold,
    "async-vs-sync": async_vs_sync,
    "equalization": equalization,
    "async-diffusion": async_diffusion,
    "random-fusion": random_fusion,
}


def run_demo(name: str, threads: int = 1, outdir: Optional[str] = None) -> DemoResult:
    if name not in DEMOS:
        raise ConfigError(f"unknown demo '{name}' (available: {', '.join(DEMOS)})", field="demo")
    log_action("DEMO_START", name)
    result = DEMOS[name](threads)
    if outdir:
        ReportWriter(outdir).write_json("summary.json", {"summary": result.board.to_dict(), "runs": result.reports})
    return result


class DemoCommand(Command):
    """Run a bundled scenario and print its pass/fail summary"""

    name = "demo"
    help = "run a bundled scenario: " + ", ".join(DEMOS)

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("demo", help="scenario name")
        parser.add_argument("-o", "--outdir", default=None, help="write summary.json here")
        add_thread_argument(parser)

    def execute(self, args: argparse.Namespace) -> int:
        result = run_demo(args.demo, thread_count(args), args.outdir)
        print(result.board.get_text())
        return 0 if result.board.all_passed else 1
