import argparse
import sys
from typing import Dict, List, Optional

from commands.command import Command
from commands.compare import CompareCommand
from commands.demo import DemoCommand
from commands.simulate import SimulateCommand
from commands.theory import TheoryCommand
from config import config
from utils.errors import AsyncNetError
from utils.logger import configure_logging, log_action


class CommandDispatcher:
    """Route a command line to its subcommand and map errors to exit codes"""

    def __init__(self, commands: Optional[List[Command]] = None):
        commands = commands or [TheoryCommand(), SimulateCommand(), CompareCommand(), DemoCommand()]
        self.command_mappings: Dict[str, Command] = {command.name: command for command in commands}
        self.parser = self._build_parser()

    def _build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(prog="asyncnet",
                                         description="Asynchronous adaptation and learning over networks")
        parser.add_argument("--log-level", default=None, help="stderr log level (default: settings, WARNING)")
        parser.add_argument("--log-file", default=None, help="also log to this file")
        subparsers = parser.add_subparsers(dest="command", metavar="command")
        subparsers.required = True
        for name, command in self.command_mappings.items():
            command.add_arguments(subparsers.add_parser(name, help=command.help, description=command.__doc__))
        return parser

    def dispatch(self, argv: Optional[List[str]] = None) -> int:
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            # argparse exits 2 on usage errors and 0 for --help
            return e.code if isinstance(e.code, int) else 2

        configure_logging(args.log_level or config.get("log_level", "WARNING"),
                          args.log_file or config.get("log_file"))
        command = self.command_mappings[args.command]
        log_action("COMMAND", " ".join(argv if argv is not None else sys.argv[1:]))
        try:
            return command.execute(args)
        except AsyncNetError as e:
            print(f"error: {e}", file=sys.stderr)
            log_action("COMMAND_FAILED", f"{type(e).__name__} exit={e.exit_code}")
            return e.exit_code
