"""Command-line entry point: ``normtta <subcommand> ...``.

Environment variables:
    NORMTTA_OUTPUT_ROOT  base directory for relative ``--out`` paths (default: cwd)
    NORMTTA_THREADS      BLAS thread count (set before numpy is imported)
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _set_threads() -> None:
    n = os.environ.get("NORMTTA_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ[var] = n


def _out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get("NORMTTA_OUTPUT_ROOT")
    return p if p.is_absolute() or not root else Path(root) / p


def _config(args):
    from .experiment import load_config

    cfg = load_config(args.config, args.set or ())
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_train(args) -> int:
    from .backbone import save_checkpoint
    from .experiment import derive_seed, prepare, train, write_json

    cfg = _config(args)
    out = _out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prep = prepare(cfg)
    params = train(prep)
    save_checkpoint(out / "checkpoint.npz", params, prep.scaler, derive_seed(cfg.seed, "train"))
    write_json(out / "config.json", cfg.to_dict())
    print(f"{params.meta['metric_name']}={params.meta['best_metric']:.6g} "
          f"epochs={params.meta['epochs_run']} -> {out / 'checkpoint.npz'}")
    return 0


def cmd_adapt(args) -> int:
    from .experiment import run_experiment

    cfg = _config(args)
    if args.modes:
        cfg.modes = args.modes.split(",")
    out = _out(args.out)
    run_experiment(cfg, out, checkpoint=args.checkpoint, evaluate=False)
    print(f"adaptation logs and predictions -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .experiment import evaluate_bundle

    rep = evaluate_bundle(_out(args.run_dir))
    print(json.dumps(rep["headline"], indent=2, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _config(args)
    rep = run_experiment(cfg, _out(args.out))
    print(json.dumps(rep["headline"], indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    from .experiment import run_sweep

    rows = run_sweep(_config(args), _out(args.out), force=args.force)
    print(f"{len(rows)} runs -> {_out(args.out) / 'sweep.csv'}")
    return 0


def cmd_report(args) -> int:
    from .experiment import report_tables

    written = report_tables([_out(d) for d in args.run_dirs], _out(args.out))
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def cmd_shift(args) -> int:
    import numpy as np
    import yaml

    from .data import fraction_split, load_csv, write_csv
    from .experiment import write_json
    from .shiftgen import ShiftSpec, apply_shift

    frame = load_csv(args.input, args.schema)
    split = fraction_split(frame, args.train_frac, args.valid_frac)
    spec = ShiftSpec(kind=args.kind, seed=args.seed if args.seed is not None else 0)
    for item in args.set or ():
        key, _, raw = item.partition("=")
        if not hasattr(spec, key):
            raise SystemExit(f"unknown shift field {key!r}")
        setattr(spec, key, yaml.safe_load(raw))
    a, b = split.train
    res = apply_shift(frame.values, split.test, spec, frame.values[a:b])
    out = _out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(frame.replace(values=np.asarray(res.values), provenance="shifted"), out)
    write_json(out.with_suffix(".shift.json"), res.metadata)
    print(f"shifted rows {split.test[0]}..{split.test[1]} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="normtta", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. adapt.steps=3 (repeatable)")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    sp = with_config(sub.add_parser("train", help="train the backbone and write a checkpoint"))
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("adapt", help="calibrate tau and stream the test range per mode"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--modes", help="comma-separated subset of no_tta,bn_stats,norm_only")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("evaluate", help="compute metrics.json for a run directory")
    sp.add_argument("run_dir")
    sp.set_defaults(func=cmd_evaluate)

    sp = with_config(sub.add_parser("run", help="train, adapt and evaluate in one go"))
    sp.set_defaults(func=cmd_run)

    sp = with_config(sub.add_parser("sweep", help="ablation grid over adaptation settings"))
    sp.add_argument("--force", action="store_true", help="allow more runs than max_runs")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="aggregate run directories into result tables")
    sp.add_argument("run_dirs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("shift", help="apply a synthetic shift to the test range of a CSV")
    sp.add_argument("input")
    sp.add_argument("--schema", default="ett", choices=("ett", "ohlcv"))
    sp.add_argument("--kind", required=True, choices=("gradual", "noise", "structural"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--train-frac", type=float, default=0.6)
    sp.add_argument("--valid-frac", type=float, default=0.2)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="shift parameter override")
    sp.add_argument("--out", required=True, help="output CSV path")
    sp.set_defaults(func=cmd_shift)
    return p


def main(argv=None) -> int:
    _set_threads()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        if args.verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
