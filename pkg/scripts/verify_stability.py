#!/usr/bin/env python3
"""Monte-Carlo check of the fallback drift bound on the vehicle model.

Uses the pinned calibration constants by default; pass a config with
``"calibrate": true`` to re-run the target-set search first::

    python scripts/verify_stability.py --out results/drift
"""
import sys

from dualsmpc.cli import main

if __name__ == "__main__":
    sys.exit(main(["verify-drift", *sys.argv[1:]]))
