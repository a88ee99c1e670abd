#!/usr/bin/env python3
"""Run the four-variant rotation ablation on the default benchmark.

Usage: python scripts/run_ablation.py OUT_DIR [--seeds 0,1,2]
                                      [--override KEY=VALUE ...]

Variants: (a) plain ViT, (b) +image-rotation augment, (c) +feature-level
rotation branches, (d) full model with the invariance constraint.  Writes
OUT_DIR/dataset and OUT_DIR/ablation/comparison.csv plus one run directory
per variant per seed.
"""

import os
import sys

from rotvit.cli import main


def run(argv):
    if not argv or argv[0].startswith("-"):
        print(__doc__, file=sys.stderr)
        return 2
    out = argv[0]
    rest = argv[1:]
    seeds = "0,1,2"
    overrides = []
    i = 0
    while i < len(rest):
        if rest[i] == "--seeds" and i + 1 < len(rest):
            seeds = rest[i + 1]
            i += 2
        else:
            overrides.append(rest[i])
            i += 1
    ds = os.path.join(out, "dataset")
    code = main(["synth", "--out", ds] + overrides)
    if code:
        return code
    return main(["compare", "--data", ds, "--seeds", seeds,
                 "--out", os.path.join(out, "ablation")] + overrides)


if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
