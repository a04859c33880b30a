"""Experiment pipeline: data -> train -> calibrate -> deploy per mode -> evaluate -> report bundle.

A run directory holds everything needed to re-evaluate it:

    config.json            resolved config snapshot
    checkpoint.npz         trained backbone + scaler
    shift.json             shift metadata (when a synthetic shift is applied)
    calibration.json       threshold and validation uncertainties
    adapt_log_<mode>.csv   per-day adaptation log
    predictions_<mode>.csv per-day predictions and labels
    metrics.json           metrics, DM tests, backtests, audit info
    curves_<mode>.csv      rolling metrics
    reliability_<mode>.csv reliability-diagram bins (classification)
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import adapt as tta
from .backbone import Architecture, TaskHead, TrainConfig, load_checkpoint, save_checkpoint, train_supervised
from .data import (MARKET_REGIMES, MARKET_SPLIT, SeriesFrame, Split, TracingWindowSource, apply_scaler,
                   chrono_split, compute_features, ett_surrogate, fit_scaler, fraction_split, load_csv,
                   make_windows, split_windows, synthetic_ohlcv)
from .evalstat import (DegenerateTestError, average_ranks, backtest, classification_metrics,
                       cross_entropy_losses, dm_test, regression_metrics, reliability_table, rolling_metrics)
from .shiftgen import ShiftSpec, apply_shift

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
SWEEP_GRIDS = {
    "context": (32, 64, 96),
    "steps": (1, 3, 5),
    "lr": (5e-5, 1e-4, 2e-4),
    "quantile": (0.7, 0.8, 0.9),
    "augmentations": ("scale", "scale+jitter", "scale+jitter+cutout", "all"),
    "losses": ("entropy-only", "consistency-only", "combined", "variance-only", "variance+ema"),
}
LOSS_ABLATIONS = {
    "entropy-only": (1.0, 0.0),
    "consistency-only": (0.0, 1.0),
    "combined": (1.0, 1.0),
    "variance-only": (1.0, 0.0),
    "variance+ema": (1.0, 1.0),
}
METHOD_LABELS = {"no_tta": "No-TTA", "bn_stats": "BN-Stats", "norm_only": "Norm-Only"}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


# ---------------------------------------------------------------------------
# config


@dataclass
class DataConfig:
    name: str = "dataset"
    source: str | None = None  # CSV path
    schema: str = "ett"  # ett | ohlcv
    generator: str | None = None  # ett_surrogate | synthetic_ohlcv
    generator_args: dict = field(default_factory=dict)
    task: str = "regression"
    target: str | None = None  # default OT (ett) or r (ohlcv)
    target_kind: str | None = None  # default "level" (ett: per-step differences) or "return" (ohlcv)
    L: int = 96
    H: int = 96
    train_end: str | None = None
    valid_end: str | None = None
    train_frac: float = 0.6
    valid_frac: float = 0.2
    regimes: list | None = None
    momentum_windows: list = field(default_factory=lambda: [5, 21])
    atr_period: int = 14
    trading_days: int = 252


@dataclass
class ModelConfig:
    hidden: int = 64
    blocks: int = 3
    kernel: int = 3
    dilations: list = field(default_factory=lambda: [1, 2, 4])
    convs_per_block: int = 2


@dataclass
class EvalConfig:
    rolling_window: int = 60
    dm_loss: str = "auto"  # auto | squared | absolute | cross_entropy
    n_bins: int = 10


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    name: str = "experiment"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: tta.AdaptConfig = field(default_factory=tta.AdaptConfig)
    modes: list = field(default_factory=lambda: list(tta.MODES))
    shift: ShiftSpec | None = None
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: dict = field(default_factory=dict)
    max_runs: int = 500

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        for m in self.modes:
            if m not in tta.MODES:
                raise ConfigError(f"unknown mode {m!r}")
        if self.data.task not in ("classification", "regression"):
            raise ConfigError(f"unknown task {self.data.task!r}")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


_NESTED = {
    ExperimentConfig: {"data": DataConfig, "model": ModelConfig, "train": TrainConfig,
                       "adapt": tta.AdaptConfig, "shift": ShiftSpec, "eval": EvalConfig},
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in d.items():
        sub = _NESTED.get(cls, {}).get(k)
        if sub is not None and v is not None:
            v = _build(sub, v, f"{where}.{k}")
        kwargs[k] = v
    if cls is ShiftSpec and "amp_bounds" in kwargs:
        kwargs["amp_bounds"] = tuple(kwargs["amp_bounds"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(d: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, d, "config")


def load_config(path, overrides=()) -> ExperimentConfig:
    """Read a YAML/JSON config; ``overrides`` are ``dotted.key=value`` strings."""
    with open(path) as fh:
        d = yaml.safe_load(fh) or {}
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(d)


def derive_seed(master: int, *parts) -> int:
    """Stable 32-bit seed from the master seed and any JSON-able coordinates."""
    payload = json.dumps([master, *parts], sort_keys=True, default=str).encode()
    return int(hashlib.sha256(payload).hexdigest()[:8], 16)


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class Prepared:
    cfg: ExperimentConfig
    frame: SeriesFrame  # model input frame (features or raw), unscaled
    split: Split
    scaler: Any
    datasets: dict
    source: TracingWindowSource
    head: TaskHead
    arch: Architecture
    shift_meta: dict | None
    train_std: np.ndarray  # std of the scaled training inputs (1 per channel)


def _load_frame(dc: DataConfig) -> SeriesFrame:
    if dc.source:
        return load_csv(dc.source, dc.schema)
    if dc.generator == "ett_surrogate":
        return ett_surrogate(**dc.generator_args)
    if dc.generator == "synthetic_ohlcv":
        return synthetic_ohlcv(**dc.generator_args)
    raise ConfigError("data needs either a source CSV or a generator")


def _split(frame: SeriesFrame, dc: DataConfig) -> Split:
    regimes = dc.regimes
    if dc.schema == "ohlcv" and regimes is None:
        regimes = [list(r) for r in MARKET_REGIMES]
    regimes = [tuple(r) for r in (regimes or [])]
    if dc.train_end or dc.valid_end or dc.schema == "ohlcv":
        a = dc.train_end or MARKET_SPLIT[0]
        b = dc.valid_end or MARKET_SPLIT[1]
        return chrono_split(frame, a, b, regimes)
    return fraction_split(frame, dc.train_frac, dc.valid_frac, regimes)


def prepare(cfg: ExperimentConfig) -> Prepared:
    dc = cfg.data
    raw = _load_frame(dc)
    raw_split = _split(raw, dc)
    shift_meta = None
    if cfg.shift is not None:
        a, b = raw_split.train
        res = apply_shift(raw.values, raw_split.test, cfg.shift, raw.values[a:b])
        raw = raw.replace(values=res.values, provenance="shifted")
        shift_meta = res.metadata
        shift_meta["timestamps"] = [str(raw.timestamps[raw_split.test[0]]), str(raw.timestamps[-1])]
    if dc.schema == "ohlcv":
        frame = compute_features(raw, dc.momentum_windows, dc.atr_period)
        t1 = raw.timestamps[raw_split.valid[0]]
        t2 = raw.timestamps[raw_split.test[0]]
        i1 = int(np.searchsorted(frame.timestamps, t1))
        i2 = int(np.searchsorted(frame.timestamps, t2))
        off = len(raw) - len(frame)
        split = Split((0, i1), (i1, i2), (i2, len(frame)), raw_split.regimes[off:])
        target, kind = dc.target or "r", dc.target_kind or "return"
    else:
        frame, split = raw, raw_split
        target, kind = dc.target or frame.channels[-1], dc.target_kind or "level"
    scaler = fit_scaler(frame, split.train)
    ds = make_windows(frame, dc.L, dc.H, dc.task, target, kind, scaler, split.regimes)
    datasets = split_windows(ds, split, dc.H)
    for k, v in datasets.items():
        if len(v) == 0:
            raise ConfigError(f"{k} split has no complete windows")
    head = TaskHead(dc.task, 1 if dc.task == "classification" else dc.H)
    m = cfg.model
    arch = Architecture(len(frame.channels), dc.L, m.hidden, m.blocks, m.kernel, tuple(m.dilations),
                        m.convs_per_block)
    scaled = apply_scaler(frame, scaler)
    a, b = split.train
    return Prepared(cfg, frame, split, scaler, datasets, TracingWindowSource(scaled.values, dc.L), head, arch,
                    shift_meta, scaled.values[a:b].std(axis=0))


def train(prep: Prepared):
    tc = dataclasses.replace(prep.cfg.train, seed=derive_seed(prep.cfg.seed, "train"))
    return train_supervised(prep.datasets["train"], prep.datasets["valid"], prep.head, tc, prep.arch)


# ---------------------------------------------------------------------------
# deployment


def adapt_seed(cfg: ExperimentConfig, acfg: tta.AdaptConfig, component: str) -> int:
    coords = dataclasses.asdict(acfg)
    coords.pop("mode")
    return derive_seed(cfg.seed, component, coords)


def calibrate(prep: Prepared, params, acfg: tta.AdaptConfig) -> dict:
    rng = np.random.default_rng(adapt_seed(prep.cfg, acfg, "calibrate"))
    days = prep.datasets["valid"].end_index
    u = tta.calibration_uncertainties(params, prep.source, days, acfg, rng, prep.train_std)
    tau = tta.calibrate_threshold(u, acfg.quantile)
    return {"tau": tau, "quantile": acfg.quantile, "days": days.tolist(), "u": u.tolist(),
            "fallback_fraction": float((u > tau).mean())}


def _stream_hash(source, days, W) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(source.values).tobytes())
    for t in days:
        h.update(tta.context_ends(int(t), W, source.L).tobytes())
    return h.hexdigest()


def deploy(prep: Prepared, params, acfg: tta.AdaptConfig, tau: float, mode: str):
    """Stream the test range day by day in one mode. Returns (log, predictions, audit)."""
    mcfg = dataclasses.replace(acfg, mode=mode)
    rng = np.random.default_rng(adapt_seed(prep.cfg, acfg, f"deploy/{mode}"))
    state = tta.AdaptState.start(params, tau)
    test = prep.datasets["test"]
    source = prep.source
    source.trace.clear()
    _, state, preds = tta.run_stream(params, state, source, test.end_index, mcfg, rng, prep.train_std)
    audit = {"violations": source.violations(), "max_lookahead": max(m - d for d, m in source.trace.items()),
             "stream_hash": _stream_hash(source, test.end_index, acfg.context)}
    source.current_day = None
    return state.log, preds, audit


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_predictions(path, prep: Prepared, preds) -> None:
    test = prep.datasets["test"]
    H = prep.head.out_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if prep.head.kind == "classification":
            w.writerow(["day", "timestamp", "regime", "label", "realized_return", "p_up"])
            for i in range(len(test)):
                w.writerow([int(test.end_index[i]), str(test.timestamps[i]), test.regimes[i] or "test",
                            int(test.labels[i]), _fmt(test.returns[i]), _fmt(preds[i][1])])
        else:
            w.writerow(["day", "timestamp", "regime"] + [f"y_{h}" for h in range(1, H + 1)]
                       + [f"pred_{h}" for h in range(1, H + 1)])
            for i in range(len(test)):
                w.writerow([int(test.end_index[i]), str(test.timestamps[i]), test.regimes[i] or "test"]
                           + [_fmt(v) for v in test.labels[i]] + [_fmt(v) for v in preds[i]])


def read_predictions(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = list(rows[0]) if rows else []
    out = {"day": np.array([int(r["day"]) for r in rows]),
           "timestamp": [r["timestamp"] for r in rows],
           "regime": np.array([r["regime"] for r in rows], dtype=object)}
    if "p_up" in cols:
        out["p_up"] = np.array([float(r["p_up"]) for r in rows])
        out["label"] = np.array([int(r["label"]) for r in rows])
        out["realized_return"] = np.array([float(r["realized_return"]) for r in rows])
    else:
        ycols = [c for c in cols if c.startswith("y_")]
        pcols = [c for c in cols if c.startswith("pred_")]
        out["y"] = np.array([[float(r[c]) for c in ycols] for r in rows])
        out["pred"] = np.array([[float(r[c]) for c in pcols] for r in rows])
    return out


def _write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_json_safe(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# evaluation of a bundle


def _per_day_losses(task: str, p: dict, kind: str) -> np.ndarray:
    if task == "classification":
        return cross_entropy_losses(p["p_up"], p["label"])
    err = p["pred"] - p["y"]
    return (np.abs(err) if kind == "absolute" else err ** 2).mean(axis=1)


def evaluate_bundle(run_dir) -> dict:
    """Compute metrics.json and curve tables from a run directory's prediction files."""
    run_dir = Path(run_dir)
    cfg = config_from_dict(json.loads((run_dir / "config.json").read_text()))
    task = cfg.data.task
    modes = [m for m in cfg.modes if (run_dir / f"predictions_{m}.csv").exists()]
    if not modes:
        raise FileNotFoundError(f"no prediction files in {run_dir}")
    kind = cfg.eval.dm_loss
    if kind == "auto":
        kind = "cross_entropy" if task == "classification" else "squared"
    calib = json.loads((run_dir / "calibration.json").read_text()) if (run_dir / "calibration.json").exists() else {}
    audit = json.loads((run_dir / "audit.json").read_text()) if (run_dir / "audit.json").exists() else {}
    report: dict[str, Any] = {"name": cfg.name, "dataset": cfg.data.name, "task": task, "dm_loss": kind,
                              "tau": calib.get("tau"), "modes": {}, "dm": [], "backtest": {},
                              "checkpoint": "checkpoint.npz",
                              "shift": "shift.json" if (run_dir / "shift.json").exists() else None}
    losses = {}
    for mode in modes:
        p = read_predictions(run_dir / f"predictions_{mode}.csv")
        log = tta.read_adapt_log(run_dir / f"adapt_log_{mode}.csv")
        entry: dict[str, Any] = {}
        regimes = sorted(set(p["regime"]))
        if task == "classification":
            entry["metrics"] = classification_metrics(p["p_up"], p["label"], cfg.eval.n_bins)
            entry["per_regime"] = {r: classification_metrics(p["p_up"][p["regime"] == r], p["label"][p["regime"] == r],
                                                             cfg.eval.n_bins) for r in regimes}
            _write_rows(run_dir / f"reliability_{mode}.csv", reliability_table(p["p_up"], p["label"], cfg.eval.n_bins))
            correct = ((p["p_up"] >= 0.5).astype(int) == p["label"]).astype(float)
            sq = (p["p_up"] - p["label"]) ** 2
            curve_a = rolling_metrics(correct, min(cfg.eval.rolling_window, len(correct)), p["regime"],
                                      "rolling_accuracy")
            curve_b = rolling_metrics(sq, min(cfg.eval.rolling_window, len(sq)), None, "rolling_mse")
            bt = backtest(p["p_up"], p["realized_return"], cfg.data.trading_days)
            report["backtest"][mode] = bt.summary()
        else:
            entry["metrics"] = regression_metrics(p["pred"], p["y"])
            entry["per_regime"] = {r: regression_metrics(p["pred"][p["regime"] == r], p["y"][p["regime"] == r])
                                   for r in regimes}
            err = p["pred"] - p["y"]
            curve_a = rolling_metrics(np.abs(err).mean(axis=1), min(cfg.eval.rolling_window, len(err)),
                                      p["regime"], "rolling_mae")
            curve_b = rolling_metrics((err ** 2).mean(axis=1), min(cfg.eval.rolling_window, len(err)), None,
                                      "rolling_mse")
        for ra, rb in zip(curve_a, curve_b):
            ra["rolling_rmse"] = math.sqrt(rb["rolling_mse"])
            ra["timestamp"] = p["timestamp"][ra["day"]]
            ra["day"] = int(p["day"][ra["day"]])
        _write_rows(run_dir / f"curves_{mode}.csv", curve_a)
        fb = [e["fallback"] for e in log]
        entry["fallback_rate"] = float(np.mean(fb)) if fb else 0.0
        entry["mean_delta_phi_norm"] = float(np.mean([e["delta_phi_norm"] for e in log]))
        entry["n_days"] = len(log)
        if mode in audit:
            entry["stream_hash"] = audit[mode]["stream_hash"]
            entry["causality_violations"] = len(audit[mode]["violations"])
        report["modes"][mode] = entry
        losses[mode] = _per_day_losses(task, p, kind)
    if "no_tta" in losses:
        for mode in modes:
            if mode == "no_tta":
                continue
            row = {"comparison": f"{mode} vs no_tta", "method_a": mode, "method_b": "no_tta",
                   "dataset": cfg.data.name}
            try:
                row.update(dm_test(losses[mode], losses["no_tta"]).to_dict())
                row["degenerate"] = False
            except DegenerateTestError:
                row.update(statistic=None, p_value=None, degenerate=True)
            report["dm"].append(row)
    report["headline"] = headline(report)
    report["complete"] = True
    write_json(run_dir / "metrics.json", report)
    return report


def headline(report: dict) -> dict:
    keys = ("accuracy", "F1", "AUC", "ECE") if report["task"] == "classification" else ("MAE", "RMSE", "R2")
    out = {}
    for mode, entry in report["modes"].items():
        for k in keys:
            out[f"{mode}/{k}"] = entry["metrics"][k]
        out[f"{mode}/fallback_rate"] = entry["fallback_rate"]
    for row in report["dm"]:
        out[f"{row['method_a']}/dm_vs_no_tta"] = row["statistic"]
    return out


# ---------------------------------------------------------------------------
# top-level runs


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # re-raised with the stage name attached
        raise StageError(name, exc) from exc


def run_experiment(cfg: ExperimentConfig, out_dir, checkpoint=None, prep: Prepared | None = None,
                   evaluate: bool = True) -> dict | None:
    """Full pipeline into ``out_dir``. Returns the metrics document (None when
    ``evaluate`` is False).

    If any stage fails an ``INCOMPLETE`` marker naming the stage is left in
    ``out_dir`` and :class:`StageError` is raised.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "INCOMPLETE"
    marker.write_text("running\n")
    try:
        write_json(out / "config.json", cfg.to_dict())
        if prep is None:
            prep = _stage("prepare", prepare, cfg)
        if prep.shift_meta is not None:
            write_json(out / "shift.json", prep.shift_meta)
        if checkpoint is None:
            params = _stage("train", train, prep)
        else:
            params, _, _ = _stage("load-checkpoint", load_checkpoint, checkpoint)
        save_checkpoint(out / "checkpoint.npz", params, prep.scaler, derive_seed(cfg.seed, "train"))
        _stage("adapt", adapt_into, prep, params, cfg.adapt, out)
        report = _stage("evaluate", evaluate_bundle, out) if evaluate else None
    except StageError as exc:
        marker.write_text(f"failed at stage {exc.stage}: {exc.__cause__}\n")
        raise
    marker.unlink()
    return report


def adapt_into(prep: Prepared, params, acfg: tta.AdaptConfig, out: Path) -> None:
    calib = calibrate(prep, params, acfg)
    write_json(out / "calibration.json", calib)
    audits = {}
    for mode in prep.cfg.modes:
        log, preds, audit = deploy(prep, params, acfg, calib["tau"], mode)
        tta.write_adapt_log(out / f"adapt_log_{mode}.csv", log)
        write_predictions(out / f"predictions_{mode}.csv", prep, preds)
        audits[mode] = audit
    write_json(out / "audit.json", audits)


def sweep_points(cfg: ExperimentConfig) -> list[dict]:
    grids = cfg.sweep or {}
    for k in grids:
        if k not in SWEEP_GRIDS:
            raise ConfigError(f"unknown sweep dimension {k!r}")
    keys = sorted(grids)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grids[k] for k in keys))]


def point_config(cfg: ExperimentConfig, point: dict) -> tta.AdaptConfig:
    over = {k: v for k, v in point.items() if k != "losses"}
    if "losses" in point:
        if point["losses"] not in LOSS_ABLATIONS:
            raise ConfigError(f"unknown loss ablation {point['losses']!r}")
        over["alpha"], over["beta"] = LOSS_ABLATIONS[point["losses"]]
    return dataclasses.replace(cfg.adapt, **over)


def run_sweep(cfg: ExperimentConfig, out_dir, force: bool = False) -> list[dict]:
    """One deployment per grid point, sharing one trained checkpoint. Writes sweep.csv."""
    points = sweep_points(cfg)
    if len(points) > cfg.max_runs and not force:
        raise ConfigError(f"sweep has {len(points)} runs (> {cfg.max_runs}); pass force to run it")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prep = _stage("prepare", prepare, cfg)
    params = _stage("train", train, prep)
    ck = out / "checkpoint.npz"
    save_checkpoint(ck, params, prep.scaler, derive_seed(cfg.seed, "train"))
    rows = []
    for i, point in enumerate(points):
        run_cfg = copy.deepcopy(cfg)
        run_cfg.adapt = point_config(cfg, point)
        run_cfg.sweep = {}
        prep.cfg = run_cfg
        rep = run_experiment(run_cfg, out / f"point_{i:03d}", checkpoint=ck, prep=prep)
        row = {"point": i, **point, "adapt_seed": adapt_seed(run_cfg, run_cfg.adapt, "deploy"),
               **rep["headline"]}
        rows.append(row)
    _write_rows(out / "sweep.csv", rows)
    return rows


# ---------------------------------------------------------------------------
# result tables


def _notes(row) -> str:
    if row.get("statistic") is None:
        return "degenerate test"
    if row["p_value"] < 0.05:
        winner = row["method_a"] if row["statistic"] < 0 else row["method_b"]
        return f"{winner} significantly better"
    return "no significant difference"


def report_tables(run_dirs, out_dir) -> dict[str, Path]:
    """Aggregate run bundles into CSVs shaped like the result tables.

    table_forecast.csv      Method, Shift, MAE, RMSE, R2           (regression runs)
    table_direction.csv     Method, <dataset...>, Avg. rank        (classification runs)
    table_dm.csv            Comparison, Dataset, DM Stat, p-value, Notes
    table_backtest_<ds>.csv Strategy, Ann. return, Ann. volatility, Sharpe (NW t)
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for d in run_dirs:
        d = Path(d)
        rep = json.loads((d / "metrics.json").read_text())
        shift = None
        if (d / "shift.json").exists():
            shift = json.loads((d / "shift.json").read_text())["spec"]["kind"]
        reports.append((rep, shift))
    written = {}

    reg = [(r, s) for r, s in reports if r["task"] == "regression"]
    if reg:
        rows = []
        for rep, shift in reg:
            for mode, e in rep["modes"].items():
                m = e["metrics"]
                rows.append({"Method": mode, "Shift": (shift or "none").capitalize(),
                             "MAE": f"{m['MAE']:.2f}", "RMSE": f"{m['RMSE']:.2f}",
                             "R2": "nan" if m["R2"] is None else f"{m['R2']:.2f}"})
        written["forecast"] = out / "table_forecast.csv"
        _write_rows(written["forecast"], rows)

    cls = [r for r, _ in reports if r["task"] == "classification"]
    if cls:
        datasets = [r["dataset"] for r in cls]
        methods = [m for m in tta.MODES if all(m in r["modes"] for r in cls)]
        scores = {m: [r["modes"][m]["metrics"]["direction_accuracy"] for r in cls] for m in methods}
        ranks = average_ranks(scores, higher_is_better=True)
        rows = []
        for m in methods:
            row = {"Method": m}
            row.update({ds: f"{v:.3f}" for ds, v in zip(datasets, scores[m])})
            row["Avg. rank"] = f"{ranks[m]:.2f}"
            rows.append(row)
        written["direction"] = out / "table_direction.csv"
        _write_rows(written["direction"], rows)

        for rep in cls:
            if not rep["backtest"]:
                continue
            rows = []
            for m in tta.MODES:
                bt = rep["backtest"].get(m)
                if bt is None:
                    continue
                sharpe = "nan" if bt["sharpe"] is None else f"{bt['sharpe']:.3f}"
                nw = "nan" if bt["nw_t"] is None else f"{bt['nw_t']:.3f}"
                rows.append({"Strategy": METHOD_LABELS[m],
                             "Ann. return": f"{100 * bt['annual_return']:.3f}",
                             "Ann. volatility": f"{100 * bt['annual_volatility']:.3f}",
                             "Sharpe (NW t)": f"{sharpe} ({nw})"})
            key = f"backtest_{rep['dataset']}"
            written[key] = out / f"table_{key}.csv"
            _write_rows(written[key], rows)

    dm_rows = []
    for rep, _ in reports:
        for row in rep["dm"]:
            dm_rows.append({"Comparison": row["comparison"], "Dataset": rep["dataset"],
                            "DM Stat": "nan" if row["statistic"] is None else f"{row['statistic']:.3f}",
                            "p-value": "nan" if row["p_value"] is None else f"{row['p_value']:.4f}",
                            "Notes": _notes(row)})
    if dm_rows:
        written["dm"] = out / "table_dm.csv"
        _write_rows(written["dm"], dm_rows)
    return written
