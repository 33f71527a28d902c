#!/usr/bin/env python3
"""Decode-load scaling: per-step gathered KV rows for the chunked engine
(constant in prompt length) against the full-attention oracle (linear).

Usage: python3 scripts/scaling_curve.py --out out/scaling
"""

import argparse
import sys

from chunkattn.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="out/scaling")
    parser.add_argument("--n-list", default="1024,4096,16384")
    parser.add_argument("--steps", type=int, default=8)
    parser.add_argument("--k", type=int, default=4)
    parser.add_argument("--chunk-size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--skip-oracle", action="store_true",
                        help="skip the quadratic oracle encode at large n")
    args = parser.parse_args()

    argv = [
        "scaling",
        "--n-list", args.n_list,
        "--steps", str(args.steps),
        "--k", str(args.k),
        "--chunk-size", str(args.chunk_size),
        "--seed", str(args.seed),
        "--residency", "offload",
        "--out", args.out,
    ]
    if args.skip_oracle:
        argv.append("--skip-oracle")
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
