#!/usr/bin/env python3
"""Run the named experiments (all by default) and write one report directory per experiment."""

import argparse
import sys
from pathlib import Path

from fvsim import harness


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("names", nargs="*", help="experiments to run (default: all)")
    ap.add_argument("--out", default="results", help="parent directory for the reports")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    names = args.names or list(harness.EXPERIMENTS)
    unknown = [n for n in names if n not in harness.EXPERIMENTS]
    if unknown:
        ap.error(f"unknown experiments: {', '.join(unknown)}")
    failed = []
    for name in names:
        cfg = harness.ExperimentConfig.default(name, seed=args.seed, out=str(Path(args.out) / name))
        rep = harness.run_experiment(cfg)
        print(rep.summary(), flush=True)
        if not rep.passed:
            failed.append(name)
    print(f"\n{len(names) - len(failed)}/{len(names)} experiments within tolerance"
          + (f"; outside: {', '.join(failed)}" if failed else ""))
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
