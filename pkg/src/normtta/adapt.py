"""Test-time adaptation of BN affine parameters on unlabeled context windows.

Three deployment modes:

* ``no_tta``    frozen network.
* ``bn_stats``  refresh BN running statistics on the context batch, no gradients.
* ``norm_only`` a few SGD steps on (gamma, beta) against an unsupervised loss,
  unless the uncertainty proxy exceeds the calibrated threshold, in which case
  the day falls back to a statistics refresh.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .augment import resolve_set, transform_batch
from .backbone import BackboneParams, DimensionError, backward_to_bn, forward, softmax_backward

logger = logging.getLogger(__name__)

MODES = ("no_tta", "bn_stats", "norm_only")
PROB_CLAMP = 1e-12


class CausalityError(RuntimeError):
    """A context batch referenced data from after the current day."""


@dataclass
class AdaptConfig:
    mode: str = "norm_only"
    context: int = 64  # W, windows per context batch
    steps: int = 5  # S
    lr: float = 1e-4
    alpha: float = 1.0
    beta: float = 1.0
    drift: float = 1e-3  # coefficient of the inter-day penalty
    ema: float = 0.9  # teacher rate rho
    n_transforms: int = 4  # K
    quantile: float = 0.8
    augmentations: str = "all"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.context < 1:
            raise ValueError("context size must be >= 1")
        if self.steps < 0 or self.lr < 0:
            raise ValueError("steps and learning rate must be non-negative")
        if not 0.0 <= self.ema <= 1.0:
            raise ValueError("EMA rate must lie in [0, 1]")
        if not 0.0 < self.quantile < 1.0:
            raise ValueError("threshold quantile must lie in (0, 1)")
        if self.alpha < 0 or self.beta < 0 or self.drift < 0:
            raise ValueError("loss weights must be non-negative")
        if self.n_transforms < 2:
            raise ValueError("need at least 2 transforms for augmentation variance")
        resolve_set(self.augmentations)


@dataclass
class WindowBatch:
    windows: np.ndarray  # (W, L, d)
    indices: np.ndarray  # end row of each window
    day: int


@dataclass
class AdaptState:
    phi_prev: np.ndarray
    teacher: BackboneParams
    tau: float
    day: int = -1
    log: list[dict] = field(default_factory=list)

    @classmethod
    def start(cls, params: BackboneParams, tau: float) -> "AdaptState":
        if not math.isfinite(tau):
            raise ValueError("threshold must be finite")
        return cls(params.get_phi(), params.copy(), float(tau))


@dataclass(frozen=True)
class UncertaintyProxy:
    kind: str  # "entropy" | "variance"
    value: float


# ---------------------------------------------------------------------------
# losses


def _check_distributions(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None]
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-4) or np.any(p < 0):
        raise ValueError("rows must be probability distributions")
    return p


def entropy_loss(probs) -> float:
    """Mean Shannon entropy (nats) of the rows."""
    p = _check_distributions(probs)
    pc = np.clip(p, PROB_CLAMP, 1.0)
    return float(np.mean(-(p * np.log(pc)).sum(axis=-1)))


def consistency_loss(p, p_aug) -> float:
    p, p_aug = np.asarray(p, dtype=np.float64), np.asarray(p_aug, dtype=np.float64)
    if p.shape != p_aug.shape:
        raise DimensionError(f"shape mismatch {p.shape} vs {p_aug.shape}")
    if p.ndim == 1:
        p, p_aug = p[None], p_aug[None]
    return float(np.mean(((p - p_aug) ** 2).sum(axis=-1)))


def variance_loss(preds) -> float:
    """Mean over windows of the K-sample variance (ddof=1).

    ``preds`` is (K, N) or (K, N, H); multi-step outputs are summed over H first.
    """
    y = np.asarray(preds, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] < 2:
        raise ValueError("augmentation variance needs K >= 2 predictions")
    if y.ndim == 3:
        y = y.sum(axis=2)
    return float(np.mean(y.var(axis=0, ddof=1)))


def distill_loss(student, teacher) -> float:
    s, t = np.asarray(student, dtype=np.float64), np.asarray(teacher, dtype=np.float64)
    if s.shape != t.shape:
        raise DimensionError(f"shape mismatch {s.shape} vs {t.shape}")
    if s.ndim <= 1:
        s, t = s.reshape(-1, 1), t.reshape(-1, 1)
    return float(np.mean(((s - t) ** 2).sum(axis=-1)))


def drift_penalty(phi, phi_prev, coef) -> float:
    phi, phi_prev = np.asarray(phi, dtype=np.float64), np.asarray(phi_prev, dtype=np.float64)
    if phi.shape != phi_prev.shape:
        raise DimensionError(f"dimension mismatch {phi.shape} vs {phi_prev.shape}")
    d = phi - phi_prev
    return float(coef * np.dot(d.ravel(), d.ravel()))


def total_loss(task: str, components: dict, alpha: float, beta: float, drift: float) -> float:
    """alpha * first + beta * second + drift, with (ent, cons) or (var, sd) as components."""
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    keys = ("ent", "cons") if task == "classification" else ("var", "sd")
    missing = [k for k in keys if k not in components]
    if missing:
        raise ValueError(f"missing loss components {missing} for task {task!r}")
    return alpha * components[keys[0]] + beta * components[keys[1]] + drift


def ema_update(teacher, student, rho: float):
    """rho * teacher + (1 - rho) * student, for arrays, dicts of arrays or BackboneParams."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("EMA rate must lie in [0, 1]")
    if isinstance(teacher, BackboneParams):
        out = teacher.copy()
        out.arrays = ema_update(teacher.arrays, student.arrays, rho)
        return out
    if isinstance(teacher, dict):
        if teacher.keys() != student.keys():
            raise DimensionError("teacher and student hold different parameters")
        return {k: ema_update(teacher[k], student[k], rho) for k in teacher}
    t, s = np.asarray(teacher, dtype=np.float64), np.asarray(student, dtype=np.float64)
    if t.shape != s.shape:
        raise DimensionError(f"shape mismatch {t.shape} vs {s.shape}")
    return rho * t + (1.0 - rho) * s


def moment_match_affine(gamma, beta, mu, sigma, mu_new, sigma_new):
    """Affine (gamma', beta') that undoes a location-scale shift of the BN input."""
    sigma_new = np.asarray(sigma_new, dtype=np.float64)
    if np.any(~(sigma_new > 0)):
        raise ValueError("shifted std must be > 0")
    gamma = np.asarray(gamma, dtype=np.float64)
    return gamma * sigma / sigma_new, beta + gamma * (mu - mu_new) / sigma_new


# ---------------------------------------------------------------------------
# uncertainty and threshold


def _entropies(probs) -> np.ndarray:
    pc = np.clip(probs, PROB_CLAMP, 1.0)
    return -(probs * np.log(pc)).sum(axis=-1)


def window_uncertainty(params: BackboneParams, windows, rng, n_transforms=4, kinds="all",
                       train_std=None) -> np.ndarray:
    """Per-window proxy: predictive entropy, or the K-sample variance of the
    (H-summed) prediction under random weak transforms."""
    windows = np.asarray(windows, dtype=np.float64)
    if params.head.kind == "classification":
        return _entropies(forward(params, windows).output)
    if n_transforms < 2:
        raise ValueError("augmentation variance needs K >= 2 transforms")
    kinds = resolve_set(kinds)
    x = np.concatenate([transform_batch(windows, kinds, rng, train_std) for _ in range(n_transforms)])
    y = forward(params, x).output.sum(axis=-1).reshape(n_transforms, len(windows))
    return y.var(axis=0, ddof=1)


def uncertainty(params: BackboneParams, batch, rng=None, n_transforms=4, kinds="all",
                train_std=None) -> UncertaintyProxy:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or len(batch) == 0:
        raise ValueError("uncertainty needs a non-empty batch of windows")
    rng = rng if rng is not None else np.random.default_rng(0)
    kind = "entropy" if params.head.kind == "classification" else "variance"
    u = window_uncertainty(params, batch, rng, n_transforms, kinds, train_std)
    return UncertaintyProxy(kind, float(u.mean()))


def calibrate_threshold(values, q: float) -> float:
    """Empirical q-quantile, linear interpolation between order statistics."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("no validation uncertainties to calibrate on")
    if not np.isfinite(v).all():
        raise ValueError("validation uncertainties must be finite")
    if not 0.0 < q <= 1.0:
        raise ValueError("quantile must lie in (0, 1]")
    return float(np.quantile(v, q, method="linear"))


# ---------------------------------------------------------------------------
# statistics refresh


def refresh_bn_stats(params: BackboneParams, batch) -> BackboneParams:
    """Replace every BN layer's running (mean, var) with the batch moments.

    The moments come from a single batch-statistics forward pass, so deeper
    layers see inputs normalized with the refreshed shallower statistics.
    The affine parameters and all weights are left untouched.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None]
    if batch.shape[0] * batch.shape[1] < 2:
        raise ValueError("need at least 2 positions per channel to estimate a variance")
    fwd = forward(params, batch, bn_mode="batch")
    out = params.copy()
    for name, (mu, var) in fwd.batch_stats.items():
        out.arrays[f"{name}.mean"] = mu
        out.arrays[f"{name}.var"] = var
    return out


def _sync_stats(teacher: BackboneParams, student: BackboneParams) -> None:
    for name in student.bn_names():
        teacher.arrays[f"{name}.mean"] = student.arrays[f"{name}.mean"]
        teacher.arrays[f"{name}.var"] = student.arrays[f"{name}.var"]


# ---------------------------------------------------------------------------
# one gradient step


def unsupervised_objective(params: BackboneParams, state: AdaptState, windows, cfg: AdaptConfig, rng,
                           train_std=None):
    """Loss value, its components and the gradient over phi for one step.

    BN runs on the stored running statistics. Fresh transforms are drawn on
    every call.
    """
    windows = np.asarray(windows, dtype=np.float64)
    W = len(windows)
    kinds = resolve_set(cfg.augmentations)
    phi = params.get_phi()
    if params.head.kind == "classification":
        xa = transform_batch(windows, kinds, rng, train_std)
        fwd = forward(params, np.concatenate([windows, xa]))
        p, pa = fwd.output[:W], fwd.output[W:]
        comps = {"ent": entropy_loss(p), "cons": consistency_loss(p, pa)}
        dp = np.zeros_like(fwd.output)
        dp[:W] = cfg.alpha * -(np.log(np.clip(p, PROB_CLAMP, 1.0)) + 1.0) / W
        diff = 2.0 * (p - pa) / W
        dp[:W] += cfg.beta * diff
        dp[W:] -= cfg.beta * diff
        dout = softmax_backward(dp, fwd.output)
    else:
        K = cfg.n_transforms
        parts = [transform_batch(windows, kinds, rng, train_std) for _ in range(K)]
        use_sd = cfg.beta > 0
        if use_sd:
            parts.append(windows)
        fwd = forward(params, np.concatenate(parts))
        out = fwd.output
        yk = out[:K * W].reshape(K, W, -1)
        s = yk.sum(axis=2)
        comps = {"var": variance_loss(yk), "sd": 0.0}
        dout = np.zeros_like(out)
        ds = cfg.alpha * 2.0 * (s - s.mean(axis=0)) / ((K - 1) * W)
        dout[:K * W] = np.repeat(ds.reshape(K * W, 1), out.shape[1], axis=1)
        if use_sd:
            _sync_stats(state.teacher, params)
            y = out[K * W:]
            yt = forward(state.teacher, windows).output
            comps["sd"] = distill_loss(y, yt)
            dout[K * W:] = cfg.beta * 2.0 * (y - yt) / W
    drift = drift_penalty(phi, state.phi_prev, cfg.drift)
    grad = backward_to_bn(params, fwd, dout) + 2.0 * cfg.drift * (phi - state.phi_prev)
    total = total_loss(params.head.kind, comps, cfg.alpha, cfg.beta, drift)
    return total, {**comps, "drift": drift}, grad


# ---------------------------------------------------------------------------
# daily loop


def _log_entry(day, cfg, tau, head_kind):
    names = ("ent", "cons") if head_kind == "classification" else ("var", "sd")
    entry = {"day": int(day), "mode": cfg.mode, "u_t": math.nan, "tau": float(tau), "fallback": False,
             "nonfinite": False, "loss_total": math.nan}
    for n in names + ("drift",):
        entry[f"loss_{n}"] = math.nan
    entry["delta_phi_norm"] = 0.0
    return entry


def adapt_day(params: BackboneParams, state: AdaptState, context: WindowBatch, today, cfg: AdaptConfig,
              rng: np.random.Generator, train_std=None):
    """Adapt on day ``context.day`` and predict from ``today``'s window.

    Returns ``(params', state, prediction)``. ``params`` is never modified in
    place; ``state`` is updated and its log gets one entry.
    """
    day = int(context.day)
    idx = np.asarray(context.indices)
    if idx.size and idx.max() > day:
        raise CausalityError(f"day {day}: context references row {int(idx.max())}")
    if len(context.windows) == 0:
        raise ValueError("empty context batch")
    today = np.asarray(context.windows[-1] if today is None else today, dtype=np.float64)
    phi0 = params.get_phi()
    entry = _log_entry(day, cfg, state.tau, params.head.kind)

    if cfg.mode == "bn_stats":
        params = refresh_bn_stats(params, context.windows)
    elif cfg.mode == "norm_only":
        u = uncertainty(params, context.windows, rng, cfg.n_transforms, cfg.augmentations, train_std)
        entry["u_t"] = u.value
        if u.value > state.tau:
            params = refresh_bn_stats(params, context.windows)
            entry["fallback"] = True
        else:
            params = params.copy()
            finite = True
            for _ in range(cfg.steps):
                total, comps, grad = unsupervised_objective(params, state, context.windows, cfg, rng, train_std)
                if not (math.isfinite(total) and np.isfinite(grad).all()):
                    finite = False
                    break
                entry["loss_total"] = total
                for k, v in comps.items():
                    entry[f"loss_{k}"] = v
                params.set_phi(params.get_phi() - cfg.lr * grad)
                if not np.isfinite(params.get_phi()).all():
                    finite = False
                    break
            if finite:
                phi = params.get_phi()
                state.phi_prev = phi.copy()
                state.teacher.set_phi(ema_update(state.teacher.get_phi(), phi, cfg.ema))
            else:
                logger.warning("day %d: non-finite adaptation loss, falling back to a statistics refresh", day)
                params.set_phi(phi0)
                params = refresh_bn_stats(params, context.windows)
                entry["fallback"] = True
                entry["nonfinite"] = True

    out = forward(params, today[None]).output[0]
    entry["delta_phi_norm"] = float(np.linalg.norm(params.get_phi() - phi0))
    entry["prediction"] = float(out[1]) if params.head.kind == "classification" else float(out.sum())
    state.day = day
    state.log.append(entry)
    return params, state, out


def context_ends(day: int, W: int, L: int) -> np.ndarray:
    """End rows of the W most recent windows up to and including ``day``."""
    return np.arange(max(day - W + 1, L - 1), day + 1)


def run_stream(params: BackboneParams, state: AdaptState, source, days, cfg: AdaptConfig,
               rng: np.random.Generator, train_std=None):
    """Stream ``days`` in order through :func:`adapt_day`.

    ``source`` serves windows by end row (see ``data.WindowSource``).
    Returns ``(params, state, predictions)``.
    """
    preds = []
    for t in days:
        t = int(t)
        if hasattr(source, "begin_day"):
            source.begin_day(t)
        ends = context_ends(t, cfg.context, source.L)
        batch = WindowBatch(source.windows(ends), ends, t)
        params, state, pred = adapt_day(params, state, batch, batch.windows[-1], cfg, rng, train_std)
        preds.append(pred)
    return params, state, np.array(preds)


def calibration_uncertainties(params: BackboneParams, source, days, cfg: AdaptConfig, rng,
                              train_std=None, chunk: int = 1024) -> np.ndarray:
    """u_t for each day with a frozen network.

    u_t is a mean of per-window proxies over the context batch, so the
    per-window values are computed once and averaged over a trailing W-window.
    """
    days = np.asarray(days, dtype=np.int64)
    if days.size == 0:
        raise ValueError("no calibration days")
    lo = max(int(days.min()) - cfg.context + 1, source.L - 1)
    ends = np.arange(lo, int(days.max()) + 1)
    per = np.concatenate([
        window_uncertainty(params, source.windows(ends[i:i + chunk]), rng, cfg.n_transforms,
                           cfg.augmentations, train_std)
        for i in range(0, len(ends), chunk)
    ])
    csum = np.concatenate([[0.0], np.cumsum(per)])
    out = []
    for t in days:
        a = max(t - cfg.context + 1, lo) - lo
        b = t - lo + 1
        out.append((csum[b] - csum[a]) / (b - a))
    return np.array(out)


LOG_COLUMNS_BASE = ("day", "mode", "u_t", "tau", "fallback", "nonfinite", "loss_total")


def write_adapt_log(path, log: list[dict]) -> None:
    if not log:
        raise ValueError("empty adaptation log")
    comps = [k for k in log[0] if k.startswith("loss_") and k != "loss_total"]
    cols = list(LOG_COLUMNS_BASE) + comps + ["delta_phi_norm", "prediction"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for e in log:
            w.writerow([repr(e[c]) if isinstance(e[c], float) else e[c] for c in cols])


def read_adapt_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        e = {}
        for k, v in r.items():
            if k == "mode":
                e[k] = v
            elif k in ("fallback", "nonfinite"):
                e[k] = v == "True"
            elif k == "day":
                e[k] = int(v)
            else:
                e[k] = float(v)
        out.append(e)
    return out

