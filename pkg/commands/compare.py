import argparse

from commands.command import Command, add_config_arguments, add_thread_argument, load_spec, thread_count
from commands.simulate import raise_if_diverged
from components.report_writer import COMPARISON_FILE, THEORY_FILE, ReportWriter
from components.summary import SummaryBoard
from config import config
from core.sim import compare_theory, run_experiment
from core.theory import predict


def comparison_board(title: str, comparison) -> SummaryBoard:
    board = SummaryBoard(title)
    for row in comparison.rows:
        if row.passed is None:
            board.add_note(f"{row.quantity}: no empirical estimate (theory {row.theory:.6g})")
            continue
        detail = f"empirical {row.empirical:.6g} vs theory {row.theory:.6g}"
        if row.relative_error is not None:
            detail += f" ({row.relative_error:+.1%}, tolerance {row.tolerance:.0%})"
        board.add_check(row.quantity, row.passed, detail)
    return board


class CompareCommand(Command):
    """Simulate, predict and compare; exits 1 when a quantity is out of tolerance"""

    name = "compare"
    help = "simulate a config and check the results against theory"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        add_config_arguments(parser)
        parser.add_argument("-o", "--outdir", required=True, help="output directory")
        add_thread_argument(parser)
        parser.add_argument("--tolerance", type=float, default=None, help="relative tolerance for MSD and ER")
        parser.add_argument("--rate-tolerance", type=float, default=None, help="relative tolerance for 1 - alpha")
        parser.add_argument("--svg", action="store_true", help="also write curves.svg")

    def execute(self, args: argparse.Namespace) -> int:
        spec = load_spec(args)
        theory = predict(spec)
        writer = ReportWriter(args.outdir)
        writer.write_json(THEORY_FILE, theory.to_dict())
        curve, report = run_experiment(spec, threads=thread_count(args),
                                       threshold=float(config.get("divergence_threshold")))
        writer.write_simulation(curve, report, plot=args.svg, title=spec.name)
        raise_if_diverged(report)

        tolerance = args.tolerance if args.tolerance is not None else float(config.get("tolerance"))
        rate_tolerance = args.rate_tolerance if args.rate_tolerance is not None else float(config.get("rate_tolerance"))
        comparison = compare_theory(report, theory, tolerance, rate_tolerance)
        writer.write_json(COMPARISON_FILE, comparison.to_dict())
        print(comparison_board(f"{spec.name} ({spec.strategy.kind.value})", comparison).get_text())
        return 0 if comparison.passed else 1
