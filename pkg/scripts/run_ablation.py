#!/usr/bin/env python3
"""Three-arm comparison (guided / no-guidance / regression) over several seeds."""

import argparse
import sys
from pathlib import Path

from kindiff.cli import main as kindiff_main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--seeds", type=int, default=3, help="training seeds per arm")
    ap.add_argument("--out", default="out/ablation")
    args = ap.parse_args(argv)

    base = ["--out", args.out]
    if args.config:
        base += ["--config", args.config]
    if args.seed is not None:
        base += ["--seed", str(args.seed)]

    if kindiff_main(["gen-data", *base]):
        return 1
    return kindiff_main(
        [
            "ablate", *base,
            "--dataset", str(Path(args.out) / "dataset.bin"),
            "--seeds", str(args.seeds),
        ]
    )


if __name__ == "__main__":
    sys.exit(run())
