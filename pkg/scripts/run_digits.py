#!/usr/bin/env python3
"""End-to-end digits experiment at desk scale.

Generates 50k/5k collage shards plus single-digit probe shards, trains the
counting network for 20k iterations, evaluates on the held-out collages,
runs the SVM representation probes, and produces localization overlays.

Usage: python3 scripts/run_digits.py [--root OUT_ROOT] [--seed N] [--skip-viz]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from countlab import cli  # noqa: E402


def step(*argv):
    argv = [str(a) for a in argv]
    print(f"\n$ countlab {' '.join(argv)}", flush=True)
    rc = cli.main(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default="out/digits", help="output root directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--skip-viz", action="store_true")
    args = ap.parse_args()
    root = Path(args.root)
    base = ["--task", "digits", "--seed", args.seed, "--threads", args.threads]

    step(*base, "--out", root / "data", "gen-digits")
    step(*base, "--out", root / "train", "train", "--data-dir", root / "data")
    ckpt = root / "train" / "checkpoint.cntc"
    step(*base, "--out", root / "eval", "eval",
         "--checkpoint", ckpt, "--data", root / "data" / "test.cnts")
    step(*base, "--out", root / "probe", "probe",
         "--checkpoint", ckpt, "--data-dir", root / "data")
    if not args.skip_viz:
        step(*base, "--out", root / "viz", "viz",
             "--checkpoint", ckpt, "--data", root / "data" / "test.cnts")
    print(f"\nAll artifacts under {root}")


if __name__ == "__main__":
    main()
