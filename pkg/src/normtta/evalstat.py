"""Forecast metrics, Diebold-Mariano / Newey-West inference and a directional backtest."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats


class DegenerateTestError(ValueError):
    """The loss differential (or return series) has zero long-run variance."""


def _negligible(spread: float, x: np.ndarray) -> bool:
    # spread at round-off level relative to the data counts as zero
    return not spread > 64 * np.finfo(np.float64).eps * float(np.abs(x).max(initial=0.0))


# ---------------------------------------------------------------------------
# point metrics


def regression_metrics(preds, targets) -> dict:
    """MAE, RMSE and R^2 = 1 - SSE/SST (SST about the target mean).

    R^2 is NaN, with ``r2_defined`` False, when the targets are constant.
    """
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != y.shape or p.size == 0:
        raise ValueError("predictions and targets must be matched and non-empty")
    err = p - y
    sse = float((err ** 2).sum())
    sst = float(((y - y.mean()) ** 2).sum())
    return {
        "MAE": float(np.abs(err).mean()),
        "RMSE": math.sqrt(sse / y.size),
        "R2": 1.0 - sse / sst if sst > 0 else math.nan,
        "r2_defined": sst > 0,
    }


def auc_score(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney rank statistic, ties averaged. NaN for one class."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = stats.rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def reliability_table(probs, labels, n_bins: int = 10) -> list[dict]:
    """Equal-width confidence bins; confidence is the probability of the predicted class."""
    p_up = _p_up(probs)
    y = np.asarray(labels).ravel().astype(int)
    pred = (p_up >= 0.5).astype(int)
    conf = np.where(pred == 1, p_up, 1.0 - p_up)
    correct = pred == y
    bins = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    rows = []
    for b in range(n_bins):
        m = bins == b
        n = int(m.sum())
        rows.append({
            "bin": b,
            "lower": b / n_bins,
            "upper": (b + 1) / n_bins,
            "count": n,
            "confidence": float(conf[m].mean()) if n else math.nan,
            "accuracy": float(correct[m].mean()) if n else math.nan,
        })
    return rows


def expected_calibration_error(probs, labels, n_bins: int = 10) -> float:
    rows = reliability_table(probs, labels, n_bins)
    total = sum(r["count"] for r in rows)
    return float(sum(r["count"] / total * abs(r["accuracy"] - r["confidence"]) for r in rows if r["count"]))


def _p_up(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 2:
        if np.any(np.abs(p.sum(axis=1) - 1) > 1e-6):
            raise ValueError("probability rows must sum to 1")
        p = p[:, 1]
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return p


def classification_metrics(probs, labels, n_bins: int = 10) -> dict:
    """Accuracy, F1 (positive class = up), AUC, direction accuracy and ECE at threshold 0.5."""
    p_up = _p_up(probs)
    y = np.asarray(labels).ravel().astype(int)
    if p_up.shape != y.shape or y.size == 0:
        raise ValueError("probabilities and labels must be matched and non-empty")
    pred = (p_up >= 0.5).astype(int)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    acc = float((pred == y).mean())
    auc = auc_score(p_up, y)
    return {
        "accuracy": acc,
        "F1": float(f1),
        "AUC": auc,
        "auc_defined": not math.isnan(auc),
        # the direction of the next move is the predicted class, so the two coincide here
        "direction_accuracy": acc,
        "ECE": expected_calibration_error(p_up, y, n_bins),
    }


def cross_entropy_losses(probs, labels) -> np.ndarray:
    p_up = np.clip(_p_up(probs), 1e-12, 1 - 1e-12)
    y = np.asarray(labels).ravel().astype(int)
    return -(y * np.log(p_up) + (1 - y) * np.log(1 - p_up))


# ---------------------------------------------------------------------------
# HAC inference


def newey_west_lag(T: int) -> int:
    """q = floor(4 (T/100)^(2/9))."""
    return int(math.floor(4.0 * (T / 100.0) ** (2.0 / 9.0)))


def long_run_variance(x, q: int) -> float:
    """gamma_0 + 2 sum_{h=1..q} (1 - h/(q+1)) gamma_h with 1/T autocovariances."""
    x = np.asarray(x, dtype=np.float64)
    T = x.size
    xc = x - x.mean()
    lrv = float(np.dot(xc, xc)) / T
    for h in range(1, min(q, T - 1) + 1):
        lrv += 2.0 * (1.0 - h / (q + 1.0)) * float(np.dot(xc[h:], xc[:-h])) / T
    return lrv


@dataclass
class DMResult:
    statistic: float
    p_value: float
    lag: int
    T: int
    mean_diff: float
    convention: str = "d_t = loss(A) - loss(B); negative statistic means A has lower loss"

    def to_dict(self) -> dict:
        return asdict(self)


def dm_test(loss_a, loss_b, lag: int | None = None) -> DMResult:
    """Diebold-Mariano test of equal predictive accuracy with Bartlett HAC variance.

    Two-sided p-value from the standard normal limit.
    """
    a = np.asarray(loss_a, dtype=np.float64).ravel()
    b = np.asarray(loss_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"loss series are not aligned: {a.shape} vs {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("loss series must be finite")
    T = a.size
    if T < 10:
        raise ValueError("need at least 10 observations")
    d = a - b
    q = newey_west_lag(T) if lag is None else int(lag)
    lrv = long_run_variance(d, q)
    if not lrv > 0 or _negligible(math.sqrt(lrv), d):
        raise DegenerateTestError("loss differential has zero long-run variance")
    dbar = float(d.mean())
    stat = dbar / math.sqrt(lrv / T)
    return DMResult(stat, float(2.0 * stats.norm.sf(abs(stat))), q, T, dbar)


@dataclass
class NWResult:
    mean: float
    variance: float  # HAC variance of the sample mean
    t_stat: float
    lag: int
    T: int


def nw_mean_test(returns, lag: int | None = None) -> NWResult:
    z = np.asarray(returns, dtype=np.float64).ravel()
    T = z.size
    if T < 10:
        raise ValueError("need at least 10 observations")
    q = newey_west_lag(T) if lag is None else int(lag)
    lrv = long_run_variance(z, q)
    if not lrv > 0 or _negligible(math.sqrt(lrv), z):
        raise DegenerateTestError("return series has zero long-run variance")
    var = lrv / T
    mu = float(z.mean())
    return NWResult(mu, var, mu / math.sqrt(var), q, T)


# ---------------------------------------------------------------------------
# backtest


@dataclass
class BacktestReport:
    annual_return: float
    annual_volatility: float
    sharpe: float  # NaN when volatility is zero
    sharpe_defined: bool
    nw_t: float
    strategy_returns: np.ndarray

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("strategy_returns")
        return d


def backtest(direction_probs, realized_returns, trading_days_per_year: int = 252) -> BacktestReport:
    """Long when P(up) >= 0.5, short otherwise; z_t = position_t * r_{t+1}."""
    p = _p_up(direction_probs)
    r = np.asarray(realized_returns, dtype=np.float64).ravel()
    if p.shape != r.shape:
        raise ValueError("probabilities and returns are not aligned")
    pos = np.where(p >= 0.5, 1.0, -1.0)
    z = pos * r
    D = trading_days_per_year
    ann_ret = float(z.mean() * D)
    sd = float(z.std(ddof=1)) if z.size > 1 else 0.0
    defined = not _negligible(sd, z)
    ann_vol = sd * math.sqrt(D) if defined else 0.0
    try:
        nw_t = nw_mean_test(z).t_stat
    except (DegenerateTestError, ValueError):
        nw_t = math.nan
    return BacktestReport(ann_ret, ann_vol, ann_ret / ann_vol if defined else math.nan, defined, nw_t, z)


# ---------------------------------------------------------------------------
# rolling curves and ranks


def rolling_metrics(values, window: int, regimes=None, name: str = "value") -> list[dict]:
    """Trailing-window mean of a per-day series, one row per day once the window is full."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if window < 1 or window > v.size:
        raise ValueError(f"window {window} must lie in [1, {v.size}]")
    csum = np.concatenate([[0.0], np.cumsum(v)])
    roll = (csum[window:] - csum[:-window]) / window
    rows = []
    for i, val in enumerate(roll):
        day = i + window - 1
        row = {"day": day, name: float(val)}
        if regimes is not None:
            row["regime"] = str(regimes[day])
        rows.append(row)
    return rows


def average_ranks(scores: dict[str, list[float]], higher_is_better: bool = True) -> dict[str, float]:
    """Mean rank per method across datasets, average ranks for ties (rank 1 = best)."""
    methods = list(scores)
    mat = np.array([scores[m] for m in methods], dtype=np.float64)
    ranks = np.empty_like(mat)
    for j in range(mat.shape[1]):
        col = -mat[:, j] if higher_is_better else mat[:, j]
        ranks[:, j] = stats.rankdata(col, method="average")
    return {m: float(ranks[i].mean()) for i, m in enumerate(methods)}
