#!/usr/bin/env python3
"""Monte Carlo Laplace transform of the Brownian path variance against its
closed form, written to runs/laplace.csv.

    python3 scripts/laplace_table.py --lambda 0.5,1,2,5 --paths 1e6 --m 1024
"""

import sys

from wienerloc.cli import main

if __name__ == "__main__":
    args = sys.argv[1:] or ["--lambda", "0.5,1,2,5", "--paths", "1e6",
                            "--m", "1024"]
    sys.exit(main(["laplace", *args]))
