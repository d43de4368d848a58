#!/usr/bin/env python3
"""
asyncnet - asynchronous adaptation and learning over networks: theory, Monte Carlo simulation and comparison
"""

import sys
from typing import List, Optional

from components.command_dispatcher import CommandDispatcher


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand and return its exit code"""
    return CommandDispatcher().dispatch(argv)


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\nInterrupted.", file=sys.stderr)
        sys.exit(130)
