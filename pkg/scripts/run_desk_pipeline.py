#!/usr/bin/env python3
"""Generate the desk-scale dataset, train the child model, and evaluate it.

Everything is driven through the CLI so the run is reproducible from the
config file alone. Outputs land in --out (dataset, checkpoint, loss curves,
metric reports).
"""

import argparse
import sys
from pathlib import Path

from kindiff.cli import main as kindiff_main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None, help="JSON config (default: desk preset)")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--task", default="child")
    ap.add_argument("--out", default="out/desk")
    args = ap.parse_args(argv)

    base = ["--out", args.out]
    if args.config:
        base += ["--config", args.config]
    if args.seed is not None:
        base += ["--seed", str(args.seed)]

    if kindiff_main(["gen-data", *base]):
        return 1
    if kindiff_main(
        [
            "train", *base,
            "--dataset", str(Path(args.out) / "dataset.bin"),
            "--task", args.task,
        ]
    ):
        return 1
    return kindiff_main(
        [
            "eval",
            "--checkpoint", str(Path(args.out) / "checkpoint.bin"),
            "--dataset", str(Path(args.out) / "dataset.bin"),
            "--out", args.out,
        ]
    )


if __name__ == "__main__":
    sys.exit(run())
