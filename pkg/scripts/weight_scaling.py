#!/usr/bin/env python3
"""Localized weight-norm scaling in the window width for a chosen model,
written to runs/weights.csv with the fitted log-log slope in the manifest.

    python3 scripts/weight_scaling.py --model heisenberg --m 80 \
        --delta-list 0.2,0.1,0.05,0.025 --paths 4096 --gamma 0.45 --radius 1.5
"""

import sys

from wienerloc.cli import main

if __name__ == "__main__":
    args = sys.argv[1:] or ["--model", "heisenberg", "--m", "80",
                            "--delta-list", "0.2,0.1,0.05,0.025",
                            "--paths", "4096", "--gamma", "0.45",
                            "--radius", "1.5"]
    sys.exit(main(["weights", *args]))
