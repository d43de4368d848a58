import argparse
from abc import ABC, abstractmethod

from config import config
from core.experiment import ExperimentSpec, load_experiment


class Command(ABC):
    """One asyncnet subcommand"""

    name = ""
    help = ""

    @abstractmethod
    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        pass

    @abstractmethod
    def execute(self, args: argparse.Namespace) -> int:
        pass


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", required=True, help="experiment config (JSON)")
    parser.add_argument("--seed", default=None, help="master seed; overrides the config and ASYNCNET_SEED")


def add_thread_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--threads", type=int, default=None, help="worker threads (default: settings or all cores)")


def load_spec(args: argparse.Namespace) -> ExperimentSpec:
    return load_experiment(args.config, seed=args.seed)


def thread_count(args: argparse.Namespace) -> int:
    threads = getattr(args, "threads", None)
    return max(1, threads) if threads else config.get_threads()
