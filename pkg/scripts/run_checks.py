#!/usr/bin/env python3
"""Run the full analytical-check suite and write runs/verify.csv.

Any extra command-line flags are forwarded to the `verify` subcommand, e.g.

    python3 scripts/run_checks.py --paths 1e6 --m 1024 --seed 42
"""

import sys

from wienerloc.cli import main

if __name__ == "__main__":
    sys.exit(main(["verify", *sys.argv[1:]]))
