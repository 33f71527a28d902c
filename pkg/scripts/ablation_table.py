#!/usr/bin/env python3
"""Ablation table: selection-policy variants, head-flexibility constraints,
and budget sweeps, on one engineered instance family.

Usage: python3 scripts/ablation_table.py --out out/ablation
"""

import argparse
import sys

from chunkattn.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="out/ablation")
    parser.add_argument("--m", type=int, default=32)
    parser.add_argument("--k", type=int, default=6)
    parser.add_argument("--trials", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    return cli_main(
        [
            "ablate",
            "--policies", "top-k,random,last-k,no-first,fix-head,fix-layer,fix-head-and-layer",
            "--m", str(args.m),
            "--k", str(args.k),
            "--trials", str(args.trials),
            "--seed", str(args.seed),
            "--k-sweep", "4,8,16",
            "--l-sweep", "16,24,48",  # window stays k*16 across the sweep
            "--out", args.out,
        ]
    )


if __name__ == "__main__":
    sys.exit(main())
