#!/usr/bin/env python3
"""Monte-Carlo study of a single policy over consecutive derived seeds.

Produces the per-step RMSE curve and a summary with the reach fraction::

    python scripts/run_montecarlo.py --policy ce-lq --runs 30 --out results/ce
"""
import sys

from dualsmpc.cli import main

if __name__ == "__main__":
    sys.exit(main(["montecarlo", *sys.argv[1:]]))
