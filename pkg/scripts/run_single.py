#!/usr/bin/env python3
"""One closed-loop navigation run with trajectory and particle-cloud dumps.

Useful for eyeballing a single seed before a full study::

    python scripts/run_single.py --policy fisher-lyapunov --seed 1000 --out results/run
"""
import sys

from dualsmpc.cli import main

if __name__ == "__main__":
    sys.exit(main(["simulate", *sys.argv[1:]]))
