"""Four-variant comparison experiment on one dataset:

    a  plain ViT baseline (no rotation branches, no constraint)
    b  baseline + image-level random-rotation augmentation
    c  + feature-level rotation branches (constraint off)
    d  full model (branches + invariance constraint)

Each variant trains under the same seed and budget; the report CSV holds
one row per variant per seed plus per-variant means.
"""

from __future__ import annotations

import csv
import dataclasses
import os

import numpy as np

from .config import TrainConfig, clone_config
from .data import Manifest
from .train import Trainer

VARIANTS = ("a", "b", "c", "d")


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    cfg = clone_config(base)
    if variant in ("a", "b"):
        cfg.rot = dataclasses.replace(cfg.rot, n_rotations=0,
                                      fixed_angle_set="")
        cfg.loss = dataclasses.replace(cfg.loss, lambda_=1.0,
                                       invariance_weight=0.0)
        cfg.aug_rotation_max = 30.0 if variant == "b" else 0.0
    elif variant == "c":
        cfg.aug_rotation_max = 0.0
        cfg.loss = dataclasses.replace(cfg.loss, invariance_weight=0.0)
    elif variant == "d":
        cfg.aug_rotation_max = 0.0
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return cfg


def run_comparison(base: TrainConfig, man: Manifest, out_dir,
                   seeds=(0, 1, 2), progress=None):
    """Train every variant for every seed; returns the list of result rows."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for seed in seeds:
        for variant in VARIANTS:
            cfg = variant_config(base, variant)
            cfg.seed = int(seed)
            run_dir = os.path.join(out_dir, f"{variant}_seed{seed}")
            trainer = Trainer(cfg, man, out_dir=run_dir)
            metrics = trainer.run()
            row = {
                "variant": variant,
                "seed": int(seed),
                "map": metrics.map,
                "rank1": metrics.rank(1),
                "rank5": metrics.rank(5),
                "rank10": metrics.rank(10),
                "minp": metrics.minp,
            }
            rows.append(row)
            if progress:
                progress(row)
    _write_report(rows, os.path.join(out_dir, "comparison.csv"))
    return rows


def summarize(rows):
    """Per-variant means over seeds."""
    out = {}
    for variant in VARIANTS:
        vr = [r for r in rows if r["variant"] == variant]
        if vr:
            out[variant] = {k: float(np.mean([r[k] for r in vr]))
                            for k in ("map", "rank1", "rank5", "rank10",
                                      "minp")}
    return out


def _write_report(rows, path):
    cols = ["variant", "seed", "map", "rank1", "rank5", "rank10", "minp"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])
        for variant, m in summarize(rows).items():
            w.writerow([f"{variant}_mean", ""] +
                       [m[c] for c in cols[2:]])
