#!/usr/bin/env python3
"""Three-policy benchmark comparison on paired seeds (the headline experiment).

Writes per-policy RMSE curves, a comparison summary with reach fractions and
detour distances, and the effective config to the output directory.  All
``compare`` flags pass through, e.g.::

    python scripts/run_benchmark.py --out results/compare --runs 30
"""
import sys

from dualsmpc.cli import main

if __name__ == "__main__":
    sys.exit(main(["compare", *sys.argv[1:]]))
