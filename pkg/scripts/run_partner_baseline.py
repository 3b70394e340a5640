#!/usr/bin/env python3
"""Train a partner-prediction model and compare it to the linear mirror baseline."""

import argparse
import sys
from pathlib import Path

from kindiff.cli import main as kindiff_main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--task", default="partner-mother",
                    choices=("partner-mother", "partner-father"))
    ap.add_argument("--out", default="out/partner")
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
            "partner-baseline",
            "--checkpoint", str(Path(args.out) / "checkpoint.bin"),
            "--dataset", str(Path(args.out) / "dataset.bin"),
            "--out", args.out,
        ]
    )


if __name__ == "__main__":
    sys.exit(run())
