"""
Entry point: ``python main.py <subcommand> case.yaml ...``
"""

import sys

from tools.cli import run_command


if __name__ == "__main__":
    sys.exit(run_command(sys.argv[1:]))
