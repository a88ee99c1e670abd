#!/usr/bin/env python3
"""Generate the default synthetic benchmark and train the full model on it.

Usage: python scripts/run_benchmark.py OUT_DIR [extra --override KEY=VALUE ...]

Writes OUT_DIR/dataset (images + manifest) and OUT_DIR/run (config echo,
loss log, checkpoint, metrics CSV).
"""

import os
import sys

from rotvit.cli import main


def run(argv):
    if not argv or argv[0].startswith("-"):
        print(__doc__, file=sys.stderr)
        return 2
    out = argv[0]
    extra = argv[1:]
    ds = os.path.join(out, "dataset")
    code = main(["synth", "--out", ds] + extra)
    if code:
        return code
    return main(["train", "--data", ds, "--out",
                 os.path.join(out, "run")] + extra)


if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
