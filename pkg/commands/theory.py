import argparse

from commands.command import Command, add_config_arguments, load_spec
from components.report_writer import atomic_write, json_text
from core.theory import predict
from utils.logger import log_action


class TheoryCommand(Command):
    """Print or save the first-order predictions for a config"""

    name = "theory"
    help = "predict steady-state MSD, excess risk and convergence rate"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        add_config_arguments(parser)
        parser.add_argument("-o", "--output", default=None, help="write theory JSON here instead of stdout")

    def execute(self, args: argparse.Namespace) -> int:
        report = predict(load_spec(args))
        text = json_text(report.to_dict())
        if args.output:
            atomic_write(args.output, text)
            log_action("FILE_WRITTEN", args.output)
        else:
            print(text, end="")
        return 0
