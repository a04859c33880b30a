"""Series ingestion, OHLCV features, chronological splits, scaling and windowing."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

ETT_COLUMNS = ("HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT")
OHLCV_COLUMNS = ("open", "high", "low", "close", "volume")
WINDOW_CACHE_VERSION = 1

# train 2000-2016, validation 2017-2019, test 2020-2025
MARKET_SPLIT = ("2017-01-01", "2020-01-01")
MARKET_REGIMES = (
    ("pandemic", "2020-01-01"),
    ("high-inflation", "2021-01-01"),
    ("recovery", "2024-01-01"),
)


class DataError(ValueError):
    pass


class ZeroVarianceError(DataError):
    def __init__(self, channel: str):
        super().__init__(f"channel {channel!r} has zero variance on the training range")
        self.channel = channel


@dataclass
class SeriesFrame:
    timestamps: np.ndarray  # datetime64[ns], strictly increasing
    channels: tuple[str, ...]
    values: np.ndarray  # (T, d)
    provenance: str = "raw"

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[ns]")
        self.values = np.asarray(self.values, dtype=np.float64)
        self.channels = tuple(self.channels)
        if self.values.ndim != 2 or self.values.shape != (len(self.timestamps), len(self.channels)):
            raise DataError(f"values {self.values.shape} do not match "
                            f"{len(self.timestamps)} timestamps x {len(self.channels)} channels")
        if len(self.timestamps) > 1 and not (np.diff(self.timestamps) > np.timedelta64(0)).all():
            raise DataError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.timestamps)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.channels.index(name)]

    def slice(self, start: int, stop: int) -> "SeriesFrame":
        return SeriesFrame(self.timestamps[start:stop], self.channels, self.values[start:stop], self.provenance)

    def replace(self, values=None, provenance=None, channels=None) -> "SeriesFrame":
        return SeriesFrame(self.timestamps,
                           self.channels if channels is None else channels,
                           self.values if values is None else values,
                           self.provenance if provenance is None else provenance)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.timestamps.astype(np.int64).tobytes())
        h.update(json.dumps(list(self.channels)).encode())
        h.update(np.ascontiguousarray(self.values).tobytes())
        return h.hexdigest()


def load_csv(path, schema: str) -> SeriesFrame:
    """Parse an ETT (date + 7 values) or OHLCV (date, open, high, low, close, volume) file."""
    if schema not in ("ett", "ohlcv"):
        raise DataError(f"unknown schema {schema!r}")
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    cols = [c.strip() for c in raw.columns]
    raw.columns = cols
    if not cols or cols[0].lower() != "date":
        raise DataError(f"{path}: first column must be 'date'")
    if schema == "ett":
        if len(cols) != 8:
            raise DataError(f"{path}: ETT schema needs date + 7 value columns, got {len(cols) - 1}")
        names = tuple(cols[1:])
    else:
        lower = [c.lower() for c in cols[1:]]
        if tuple(lower) != OHLCV_COLUMNS:
            raise DataError(f"{path}: OHLCV header must be date,{','.join(OHLCV_COLUMNS)}; got {cols}")
        names = OHLCV_COLUMNS
    ts = pd.to_datetime(raw.iloc[:, 0], errors="coerce")
    vals = raw.iloc[:, 1:].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad = ts.isna().to_numpy() | ~np.isfinite(vals).all(axis=1)
    if bad.any():
        row = int(np.argmax(bad))
        # +2: header line and 1-based numbering
        raise DataError(f"{path}: malformed row {row + 2}: {raw.iloc[row].tolist()}")
    # pandas' fast float parser can be off by an ulp; reparse exactly
    vals = np.char.strip(raw.iloc[:, 1:].to_numpy(dtype=str)).astype(np.float64)
    stamps = ts.to_numpy(dtype="datetime64[ns]")
    if len(stamps) > 1:
        steps = np.diff(stamps)
        if (steps == np.timedelta64(0)).any():
            i = int(np.argmax(steps == np.timedelta64(0))) + 1
            raise DataError(f"{path}: duplicate timestamp {raw.iloc[i, 0]}")
        if (steps < np.timedelta64(0)).any():
            i = int(np.argmax(steps < np.timedelta64(0))) + 1
            raise DataError(f"{path}: timestamps not increasing at row {i + 2} ({raw.iloc[i, 0]})")
    return SeriesFrame(stamps, names, vals, provenance="raw")


def write_csv(frame: SeriesFrame, path, date_format: str | None = None) -> None:
    df = pd.DataFrame(frame.values, columns=list(frame.channels))
    dates = pd.DatetimeIndex(frame.timestamps)
    df.insert(0, "date", dates.strftime(date_format) if date_format else dates.astype(str))
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


# ---------------------------------------------------------------------------
# features


def _ema(x: np.ndarray, alpha: float) -> np.ndarray:
    out = np.empty_like(x)
    out[0] = x[0]
    for i in range(1, len(x)):
        out[i] = alpha * x[i] + (1 - alpha) * out[i - 1]
    return out


def compute_features(ohlcv: SeriesFrame, momentum_windows: Sequence[int] = (5, 21),
                     atr_period: int = 14) -> SeriesFrame:
    """Log return, momentum, reversal, ATR, Parkinson and Garman-Klass variances.

    Rows whose longest lag is undefined are dropped; every feature at row t
    depends only on rows <= t.
    """
    o, h, l, c = (ohlcv.column(k) for k in ("open", "high", "low", "close"))
    prices = np.stack([o, h, l, c], axis=1)
    if not (prices > 0).all():
        row = int(np.argmax(~(prices > 0).all(axis=1)))
        raise DataError(f"non-positive price at row {row}")
    if (h < l).any():
        raise DataError(f"high < low at row {int(np.argmax(h < l))}")
    windows = sorted(set(int(n) for n in momentum_windows))
    if not windows or windows[0] < 1:
        raise DataError("momentum windows must be positive")
    drop = windows[-1] + 1
    if len(ohlcv) <= drop:
        raise DataError(f"need more than {drop} rows to compute features")

    logc = np.log(c)
    r = np.full(len(c), np.nan)
    r[1:] = np.diff(logc)
    names, cols = ["r"], [r]
    for n in windows:
        mom = np.full(len(c), np.nan)
        mom[n:] = logc[n:] - logc[:-n]
        names.append(f"mom_{n}")
        cols.append(mom)
    for n in windows:
        # -sum_{i=1..n} r_{t-i} = -(log C_{t-1} - log C_{t-1-n})
        rev = np.full(len(c), np.nan)
        rev[n + 1:] = -(logc[n:-1] - logc[:-n - 1])
        names.append(f"rev_{n}")
        cols.append(rev)
    tr = np.full(len(c), np.nan)
    prev_c = c[:-1]
    tr[1:] = np.maximum.reduce([h[1:] - l[1:], np.abs(h[1:] - prev_c), np.abs(l[1:] - prev_c)])
    atr = np.full(len(c), np.nan)
    atr[1:] = _ema(tr[1:], 2.0 / (atr_period + 1))
    hl = np.log(h / l)
    co = np.log(c / o)
    names += ["atr", "parkinson", "garman_klass"]
    cols += [atr, hl ** 2 / (4 * np.log(2)), 0.5 * hl ** 2 - (2 * np.log(2) - 1) * co ** 2]
    values = np.stack(cols, axis=1)[drop:]
    return SeriesFrame(ohlcv.timestamps[drop:], tuple(names), values, provenance="features")


# ---------------------------------------------------------------------------
# splits and scaling


@dataclass
class Split:
    train: tuple[int, int]
    valid: tuple[int, int]
    test: tuple[int, int]
    regimes: np.ndarray = field(default_factory=lambda: np.array([], dtype=object))  # one tag per row

    def ranges(self):
        return {"train": self.train, "valid": self.valid, "test": self.test}


def _regime_tags(timestamps, regime_boundaries) -> np.ndarray:
    tags = np.full(len(timestamps), "", dtype=object)
    if regime_boundaries:
        starts = np.array([np.datetime64(pd.Timestamp(s)) for _, s in regime_boundaries], dtype="datetime64[ns]")
        if not (np.diff(starts) > np.timedelta64(0)).all():
            raise DataError("regime boundaries must be increasing")
        pos = np.searchsorted(starts, timestamps, side="right") - 1
        names = np.array([n for n, _ in regime_boundaries], dtype=object)
        tags = np.where(pos >= 0, names[np.clip(pos, 0, None)], "")
    return tags


def chrono_split(frame: SeriesFrame, train_end, valid_end, regime_boundaries=()) -> Split:
    """Train is ``[start, train_end)``, validation ``[train_end, valid_end)``, test the rest."""
    a = np.datetime64(pd.Timestamp(train_end))
    b = np.datetime64(pd.Timestamp(valid_end))
    if not a < b:
        raise DataError("train_end must precede valid_end")
    ts = frame.timestamps
    if len(ts) == 0 or a <= ts[0] or b > ts[-1]:
        raise DataError(f"split boundaries {train_end}, {valid_end} outside the frame's time range "
                        "or leave an empty split")
    i1 = int(np.searchsorted(ts, a))
    i2 = int(np.searchsorted(ts, b))
    if i1 == 0:
        raise DataError("empty training split")
    if i2 == i1 or i2 == len(ts):
        raise DataError("empty validation or test split")
    return Split((0, i1), (i1, i2), (i2, len(ts)), _regime_tags(ts, regime_boundaries))


def fraction_split(frame: SeriesFrame, train_frac: float, valid_frac: float, regime_boundaries=()) -> Split:
    n = len(frame)
    i1 = int(round(n * train_frac))
    i2 = int(round(n * (train_frac + valid_frac)))
    if not 0 < i1 < i2 < n:
        raise DataError("fractions leave an empty split")
    return Split((0, i1), (i1, i2), (i2, n), _regime_tags(frame.timestamps, regime_boundaries))


@dataclass
class Scaler:
    channels: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


def fit_scaler(frame: SeriesFrame, train_range: tuple[int, int]) -> Scaler:
    """Per-channel mean and population std (divide by n) over the training rows."""
    start, stop = train_range
    if stop <= start:
        raise DataError("empty training range")
    rows = frame.values[start:stop]
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    for name, s in zip(frame.channels, std):
        if not s > 0:
            raise ZeroVarianceError(name)
    return Scaler(frame.channels, mean, std)


def apply_scaler(frame: SeriesFrame, scaler: Scaler) -> SeriesFrame:
    if tuple(frame.channels) != tuple(scaler.channels):
        raise DataError("scaler channels do not match the frame")
    return frame.replace(values=scaler.transform(frame.values))


def invert_scaler(frame: SeriesFrame, scaler: Scaler) -> SeriesFrame:
    return frame.replace(values=scaler.inverse(frame.values))


# ---------------------------------------------------------------------------
# windows


@dataclass
class WindowDataset:
    inputs: np.ndarray  # (N, L, d), read-only view
    labels: np.ndarray  # (N,) direction or (N, H) returns
    end_index: np.ndarray  # row index t of each window's last input
    timestamps: np.ndarray
    regimes: np.ndarray | None = None
    returns: np.ndarray | None = None  # realized next-step return per sample (unscaled)

    def __len__(self) -> int:
        return len(self.end_index)

    def subset(self, mask) -> "WindowDataset":
        mask = np.asarray(mask)
        return WindowDataset(self.inputs[mask], self.labels[mask], self.end_index[mask], self.timestamps[mask],
                             None if self.regimes is None else self.regimes[mask],
                             None if self.returns is None else self.returns[mask])


def target_returns(frame: SeriesFrame, target: str, target_kind: str) -> np.ndarray:
    """Per-step target values: the channel itself ("return", "value") or its
    first difference ("level")."""
    x = frame.column(target)
    if target_kind in ("return", "value"):
        return x.copy()
    if target_kind == "level":
        ret = np.full(len(x), np.nan)
        ret[1:] = np.diff(x)
        return ret
    raise DataError(f"unknown target kind {target_kind!r}")


def make_windows(frame: SeriesFrame, L: int, H: int, task: str, target: str,
                 target_kind: str = "return", scaler: Scaler | None = None,
                 regimes: np.ndarray | None = None) -> WindowDataset:
    """Sliding windows X_t = rows [t-L+1, t]; labels from rows (t, t+H].

    ``task="classification"``: label 1 iff the next return is > 0 (ties are 0).
    ``task="regression"``: the H per-step returns, divided by the target's
    training std when a scaler is given; with ``target_kind="value"`` the
    future values themselves, standardized like the inputs. Inputs are
    scaled with ``scaler``.
    """
    T = len(frame)
    if L < 1 or H < 1:
        raise DataError("L and H must be >= 1")
    if T < L + H:
        raise DataError(f"frame of length {T} is shorter than L+H={L + H}")
    values = scaler.transform(frame.values) if scaler is not None else frame.values
    inputs = np.lib.stride_tricks.sliding_window_view(values, L, axis=0).transpose(0, 2, 1)
    n = T - L - H + 1
    inputs = inputs[:n]
    ends = np.arange(L - 1, L - 1 + n)
    ret = target_returns(frame, target, target_kind)
    future = np.stack([ret[ends + h] for h in range(1, H + 1)], axis=1)
    if task == "classification":
        labels = (future[:, 0] > 0).astype(np.int64)
    elif task == "regression":
        labels = future.copy()
        if scaler is not None:
            c = frame.channels.index(target)
            if target_kind == "value":
                labels -= scaler.mean[c]
            labels /= scaler.std[c]
    else:
        raise DataError(f"unknown task {task!r}")
    return WindowDataset(inputs, labels, ends, frame.timestamps[ends],
                         None if regimes is None else np.asarray(regimes)[ends],
                         future[:, 0].copy())


def split_windows(ds: WindowDataset, split: Split, H: int) -> dict[str, WindowDataset]:
    """Assign windows to splits by their label span; windows whose labels
    cross a split boundary are dropped."""
    out = {}
    for name, (a, b) in split.ranges().items():
        mask = (ds.end_index >= a) & (ds.end_index + H < b)
        out[name] = ds.subset(mask)
    return out


class WindowSource:
    """Serves windows by end row from a scaled value matrix."""

    def __init__(self, values: np.ndarray, L: int):
        self.values = np.asarray(values, dtype=np.float64)
        self.L = L
        self._view = np.lib.stride_tricks.sliding_window_view(self.values, L, axis=0).transpose(0, 2, 1)

    def windows(self, ends) -> np.ndarray:
        ends = np.asarray(ends, dtype=np.int64)
        if ends.size and (ends.min() < self.L - 1 or ends.max() >= len(self.values)):
            raise IndexError("window end outside the series")
        return self._view[ends - (self.L - 1)]


class TracingWindowSource(WindowSource):
    """WindowSource that records the largest row index read per day."""

    def __init__(self, values, L):
        super().__init__(values, L)
        self.trace: dict[int, int] = {}
        self.current_day: int | None = None

    def begin_day(self, day: int) -> None:
        self.current_day = day

    def windows(self, ends) -> np.ndarray:
        out = super().windows(ends)
        if self.current_day is not None and np.size(ends):
            top = int(np.max(ends))
            self.trace[self.current_day] = max(top, self.trace.get(self.current_day, -1))
        return out

    def violations(self) -> list[tuple[int, int]]:
        return [(d, m) for d, m in self.trace.items() if m > d]


# ---------------------------------------------------------------------------
# window cache


def window_cache_key(source_hash: str, L: int, H: int, task: str, scaler: Scaler | None) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"v": WINDOW_CACHE_VERSION, "src": source_hash, "L": L, "H": H, "task": task}).encode())
    if scaler is not None:
        h.update(scaler.mean.tobytes())
        h.update(scaler.std.tobytes())
    return h.hexdigest()[:32]


def save_windows(path, ds: WindowDataset) -> None:
    payload = dict(inputs=np.ascontiguousarray(ds.inputs), labels=ds.labels, end_index=ds.end_index,
                   timestamps=ds.timestamps.astype(np.int64), version=np.array(WINDOW_CACHE_VERSION))
    if ds.regimes is not None:
        payload["regimes"] = ds.regimes.astype(str)
    if ds.returns is not None:
        payload["returns"] = ds.returns
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_windows(path) -> WindowDataset:
    with np.load(Path(path)) as z:
        if int(z["version"]) != WINDOW_CACHE_VERSION:
            raise DataError("window cache version mismatch")
        return WindowDataset(z["inputs"], z["labels"], z["end_index"],
                             z["timestamps"].astype("datetime64[ns]"),
                             z["regimes"].astype(object) if "regimes" in z else None,
                             z["returns"] if "returns" in z else None)


# ---------------------------------------------------------------------------
# synthetic sources for desk-scale runs


def ett_surrogate(n_hours: int = 17420, seed: int = 0, start: str = "2016-07-01") -> SeriesFrame:
    """Hourly 7-channel series with ETT-like daily/weekly/annual seasonality.

    Six load channels share a daily and weekly cycle with channel-specific
    phase and AR(1) noise; the oil temperature ``OT`` follows the loads with
    a lag plus an annual cycle.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n_hours, dtype=np.float64)
    daily = np.sin(2 * np.pi * t / 24)
    weekly = np.sin(2 * np.pi * t / 168)
    annual = np.sin(2 * np.pi * t / (24 * 365.25))

    def ar1(phi, scale):
        e = rng.normal(0.0, scale, n_hours)
        out = np.empty(n_hours)
        out[0] = e[0] / np.sqrt(1 - phi ** 2)
        for i in range(1, n_hours):
            out[i] = phi * out[i - 1] + e[i]
        return out

    loads = []
    for j in range(6):
        level = 2.0 + 2.0 * j
        phase = 2 * np.pi * j / 12
        amp = 1.0 + 0.3 * j
        ch = (level + amp * np.sin(2 * np.pi * t / 24 + phase) + 0.5 * weekly + 0.8 * annual
              + ar1(0.9, 0.25))
        loads.append(ch)
    load_mean = np.mean(loads, axis=0)
    lagged = np.concatenate([np.full(3, load_mean[0]), load_mean[:-3]])
    ot = 15.0 + 8.0 * annual + 1.5 * daily + 0.6 * (lagged - load_mean.mean()) + ar1(0.95, 0.3)
    values = np.column_stack(loads + [ot])
    stamps = np.datetime64(start, "h") + np.arange(n_hours).astype("timedelta64[h]")
    return SeriesFrame(stamps, ETT_COLUMNS, values, provenance="raw")


def synthetic_ohlcv(start: str = "2000-01-03", end: str = "2025-12-31", seed: int = 0,
                    drift: float = 2e-4, vol: float = 0.01, predictability: float = 0.05) -> SeriesFrame:
    """Business-daily OHLCV bars from a random walk with regime-dependent volatility.

    ``predictability`` adds a weak dependence of the next return on the
    current 5-day reversal so that direction labels carry some signal.
    """
    rng = np.random.default_rng(seed)
    days = pd.bdate_range(start, end)
    n = len(days)
    years = days.year.to_numpy()
    vol_t = np.full(n, vol)
    vol_t[years == 2020] *= 2.5
    vol_t[(years >= 2021) & (years <= 2023)] *= 1.5
    r = np.empty(n)
    r[0] = rng.normal(drift, vol)
    for i in range(1, n):
        past = r[max(0, i - 5):i].sum()
        r[i] = drift - predictability * past + rng.normal(0.0, vol_t[i])
    close = 100.0 * np.exp(np.cumsum(r))
    gap = rng.normal(0.0, 0.2, n) * vol_t
    open_ = np.concatenate([[100.0], close[:-1]]) * np.exp(gap)
    span = np.abs(rng.normal(0.0, 0.6, (n, 2))) * vol_t[:, None]
    high = np.maximum(open_, close) * np.exp(span[:, 0])
    low = np.minimum(open_, close) * np.exp(-span[:, 1])
    volume = np.round(np.exp(rng.normal(15.0, 0.3, n)))
    return SeriesFrame(days.to_numpy(dtype="datetime64[ns]"), OHLCV_COLUMNS,
                       np.column_stack([open_, high, low, close, volume]), provenance="raw")
