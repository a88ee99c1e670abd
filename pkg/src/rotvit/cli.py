"""Command-line entry point.

Subcommands: synth, train, eval, compare, dump-embeddings.
Exit codes: 0 success, 2 usage, 3 config, 4 data, 5 numeric abort.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from .compare import run_comparison, summarize
from .config import _SCHEMA, TrainConfig, apply_setting, load_config
from .data import ImageStore, load_manifest, synth_generate
from .errors import RotvitError, UsageError
from .evalmetrics import embedding_dump, metrics_to_csv
from .train import Trainer, evaluate_model, extract_features


def _key_help() -> str:
    cfg = TrainConfig()
    lines = ["config keys (flat 'key = value' file, '#' comments):"]
    for key in sorted(_SCHEMA):
        path, f = _SCHEMA[key]
        target = cfg
        for attr in path:
            target = getattr(target, attr)
        lines.append(f"  {key} (default {getattr(target, f.name)})")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rotvit",
        description="Rotation-invariant transformer re-identification "
                    "experiments at desk scale.",
        epilog=_key_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="dotted config override, applied last")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.add_argument("--seed", type=int, help="shorthand for data.seed")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="run directory")

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", help="also write the metrics CSV here")

    sp = sub.add_parser("compare", help="four-variant ablation experiment")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seeds", default="0,1,2",
                    help="comma-separated training seeds")

    sp = sub.add_parser("dump-embeddings",
                        help="write test features to CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="query",
                    choices=["query", "gallery", "both"])
    return p


def _config(args) -> TrainConfig:
    return load_config(args.config, args.override)


def cmd_synth(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        apply_setting(cfg, "data.seed", str(args.seed))
    synth_generate(cfg.data, args.out)
    print(f"dataset written to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    man = load_manifest(args.data)
    trainer = Trainer(cfg, man, out_dir=args.out)
    metrics = trainer.run()
    print(f"map,{metrics.map:.6f}")
    print(f"rank1,{metrics.rank(1):.6f}")
    print(f"checkpoint,{os.path.join(args.out, 'checkpoint.rtrx')}")
    return 0


def cmd_eval(args) -> int:
    model, _, _ = ckpt.load_model(args.checkpoint)
    man = load_manifest(args.data)
    metrics = evaluate_model(model, man)
    print("metric,value")
    for name, v in metrics.as_rows():
        print(f"{name},{v}")
    if args.out:
        metrics_to_csv(metrics, args.out)
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    man = load_manifest(args.data)
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError as e:
        raise UsageError(f"bad --seeds value: {e}") from e

    def progress(row):
        print(f"variant {row['variant']} seed {row['seed']}: "
              f"map {row['map']:.4f} rank1 {row['rank1']:.4f}", flush=True)

    rows = run_comparison(cfg, man, args.out, seeds=seeds, progress=progress)
    for variant, m in summarize(rows).items():
        print(f"{variant}_mean: map {m['map']:.4f} rank1 {m['rank1']:.4f}")
    print(f"report: {os.path.join(args.out, 'comparison.csv')}")
    return 0


def cmd_dump_embeddings(args) -> int:
    model, _, _ = ckpt.load_model(args.checkpoint)
    man = load_manifest(args.data)
    store = ImageStore(man)
    recs = []
    if args.split in ("query", "both"):
        recs += man.split("query")
    if args.split in ("gallery", "both"):
        recs += man.split("gallery")
    feats = (extract_features(model, store, recs) if recs
             else np.zeros((0, model.cfg.backbone.dim)))
    embedding_dump(feats, [r.identity for r in recs], args.out)
    print(f"wrote {len(recs)} embeddings to {args.out}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "dump-embeddings": cmd_dump_embeddings,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except RotvitError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
