#!/usr/bin/env python3
"""Sweep the first condition's guidance scale against a trained checkpoint."""

import argparse
import sys

from kindiff.cli import main as kindiff_main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--grid", default="0,0.5,1.0,1.5,2.0")
    ap.add_argument("--g2", type=float, default=1.2)
    ap.add_argument("--pairs", type=int, default=5)
    ap.add_argument("--samples-per-pair", type=int, default=25)
    ap.add_argument("--out", default="out/sweep")
    args = ap.parse_args(argv)
    return kindiff_main(
        [
            "guidance-sweep",
            "--checkpoint", args.checkpoint,
            "--dataset", args.dataset,
            "--grid", args.grid,
            "--g2", str(args.g2),
            "--pairs", str(args.pairs),
            "--samples-per-pair", str(args.samples_per_pair),
            "--out", args.out,
        ]
    )


if __name__ == "__main__":
    sys.exit(run())
