"""Stage-II runner: one classification run per OHLCV CSV, then direction/DM/backtest tables.

    python scripts/markets.py configs/markets.yaml data/spx.csv data/ndx.csv --out runs/markets

Without CSV arguments the config's generator is used (synthetic prices).
"""
import argparse
from pathlib import Path

import yaml

from normtta import experiment as X


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("csvs", nargs="*", help="OHLCV files with date,open,high,low,close,volume columns")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    base = yaml.safe_load(Path(args.config).read_text())
    if args.seed is not None:
        base["seed"] = args.seed
    out = Path(args.out)
    dirs = []
    for src in args.csvs or [None]:
        d = yaml.safe_load(yaml.safe_dump(base))
        if src is not None:
            d["data"]["source"] = src
            d["data"]["name"] = Path(src).stem
            d["data"].pop("generator", None)
            d["data"].pop("generator_args", None)
        run = out / d["data"]["name"]
        rep = X.run_experiment(X.config_from_dict(d), run)
        dirs.append(run)
        for mode, e in rep["modes"].items():
            m = e["metrics"]
            print(f"{d['data']['name']:12s} {mode:9s} acc {m['accuracy']:.3f} AUC {m['AUC']:.3f} "
                  f"fallback {e['fallback_rate']:.3f}")
    for name, path in X.report_tables(dirs, out / "tables").items():
        print(f"{name}: {path}")


if __name__ == "__main__":
    main()
