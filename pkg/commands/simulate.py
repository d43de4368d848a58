import argparse
import sys

from commands.command import Command, add_config_arguments, add_thread_argument, load_spec, thread_count
from components.report_writer import ReportWriter
from config import config
from core.sim import run_experiment
from utils.errors import DivergenceError


def raise_if_diverged(report) -> None:
    if report.diverged:
        divergence = report.divergence
        raise DivergenceError(divergence["iteration"], divergence["agents"])


class SimulateCommand(Command):
    """Run the Monte Carlo simulation and write curves.csv and report.json"""

    name = "simulate"
    help = "simulate a config and write learning curves and steady-state estimates"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        add_config_arguments(parser)
        parser.add_argument("-o", "--outdir", required=True, help="output directory")
        add_thread_argument(parser)
        parser.add_argument("--svg", action="store_true", help="also write curves.svg")

    def execute(self, args: argparse.Namespace) -> int:
        spec = load_spec(args)
        curve, report = run_experiment(spec, threads=thread_count(args),
                                       threshold=float(config.get("divergence_threshold")))
        ReportWriter(args.outdir).write_simulation(curve, report, plot=args.svg, title=spec.name)
        raise_if_diverged(report)
        if not report.converged:
            print(f"warning: steady state not reached within {report.iterations} iterations", file=sys.stderr)
        print(f"msd={report.msd:.6g} (se {report.msd_se:.2g}) er={report.er:.6g} runs={report.runs}")
        return 0
