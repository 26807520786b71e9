#!/usr/bin/env python3
"""End-to-end density experiment on the bracket-generated diffusion pair:
spectral gate, per-window diagnostics, and the IBP vs kernel density
comparison inside the target ball, written to runs/density.csv.

    python3 scripts/run_density_experiment.py --paths 40000 --m 16 \
        --delta-list 0.5,0.25 --seed 7
"""

import sys

from wienerloc.cli import main

if __name__ == "__main__":
    args = sys.argv[1:] or ["--paths", "40000", "--m", "16",
                            "--delta-list", "0.5,0.25", "--seed", "7"]
    sys.exit(main(["density", *args]))
