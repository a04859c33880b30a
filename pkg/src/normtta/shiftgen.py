"""Synthetic regime-shift generators: gradual drift, noise bursts, seasonal switches.

All generators work channel-wise on ``(T,)`` or ``(T, d)`` arrays and take an
explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

SEGMENT_MIN = 96
SEGMENT_MAX = 192
DRIFT_BAND = (0.2, 0.4)  # training stds per 1000 steps


class ShiftError(ValueError):
    pass


@dataclass
class ShiftSpec:
    kind: str  # "gradual" | "noise" | "structural"
    seed: int = 0
    # gradual: None means calibrate to the middle of DRIFT_BAND
    kappa: float | list[float] | None = None
    nu: float | list[float] | None = None
    mu0: float = 0.0
    drift_rate: float = 0.3
    # noise inflation
    k: float = 2.0
    n_segments: int = 3
    segment_min: int = SEGMENT_MIN
    segment_max: int = SEGMENT_MAX
    # structural switch
    period: int = 24
    harmonics: int = 2
    n_change_points: int = 2
    amp_bounds: tuple[float, float] = (0.5, 1.5)
    sigma: float | None = None

    def __post_init__(self):
        if self.kind not in ("gradual", "noise", "structural"):
            raise ShiftError(f"unknown shift kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["amp_bounds"] = list(self.amp_bounds)
        return d


def gradual_drift(series, kappa, nu, mu0=0.0) -> np.ndarray:
    """x_t = (1 + kappa t/T) s_t + mu0 + nu t/T for t = 1..T, per channel."""
    s = np.asarray(series, dtype=np.float64)
    T = s.shape[0]
    if T == 0:
        raise ShiftError("empty series")
    kappa, nu, mu0 = (np.asarray(v, dtype=np.float64) for v in (kappa, nu, mu0))
    if not (np.isfinite(kappa).all() and np.isfinite(nu).all() and np.isfinite(mu0).all()):
        raise ShiftError("drift coefficients must be finite")
    frac = np.arange(1, T + 1, dtype=np.float64) / T
    if s.ndim == 2:
        frac = frac[:, None]
    return (1.0 + kappa * frac) * s + mu0 + nu * frac


def calibrate_gradual(clean, train_std, rate: float = 0.3):
    """Per-channel (kappa, nu) so that over the segment the std grows and the
    mean moves by ``rate`` training stds per 1000 steps each."""
    s = np.asarray(clean, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    T = s.shape[0]
    train_std = np.asarray(train_std, dtype=np.float64)
    target = rate * train_std * T / 1000.0
    seg_std = s.std(axis=0)
    if not (seg_std > 0).all():
        raise ShiftError("cannot calibrate drift on a constant channel")
    kappa = target / seg_std
    nu = target - kappa * s.mean(axis=0)
    return kappa, nu


def sample_segments(T: int, n: int, rng: np.random.Generator, min_len: int = SEGMENT_MIN,
                    max_len: int = SEGMENT_MAX, max_tries: int = 10_000) -> list[tuple[int, int]]:
    """Rejection-sample ``n`` non-overlapping (start, length) segments in [0, T)."""
    if n * min_len > T:
        raise ShiftError(f"{n} segments of length >= {min_len} do not fit in {T} steps")
    segs: list[tuple[int, int]] = []
    tries = 0
    while len(segs) < n:
        tries += 1
        if tries > max_tries:
            raise ShiftError("could not place non-overlapping segments")
        length = int(rng.integers(min_len, max_len + 1))
        if length > T:
            continue
        start = int(rng.integers(0, T - length + 1))
        if all(start + length <= a or a + b <= start for a, b in segs):
            segs.append((start, length))
    return sorted(segs)


def _validate_segments(T, segments, min_len, max_len):
    last_end = 0
    for start, length in sorted(segments):
        if not min_len <= length <= max_len:
            raise ShiftError(f"segment length {length} outside [{min_len}, {max_len}]")
        if start < 0 or start + length > T:
            raise ShiftError(f"segment ({start}, {length}) exceeds the series bounds")
        if start < last_end:
            raise ShiftError("segments overlap")
        last_end = start + length


def noise_inflation(series, k, segments, sigma_base, rng: np.random.Generator,
                    min_len: int = SEGMENT_MIN, max_len: int = SEGMENT_MAX):
    """Add N(0, sigma^2) noise, inflated to N(0, (k sigma)^2) inside the segments.

    Returns ``(series', mask)`` with ``mask`` True inside segments.
    """
    s = np.asarray(series, dtype=np.float64)
    T = s.shape[0]
    _validate_segments(T, segments, min_len, max_len)
    mask = np.zeros(T, dtype=bool)
    for start, length in segments:
        mask[start:start + length] = True
    sigma = np.asarray(sigma_base, dtype=np.float64)
    if np.all(sigma == 0):
        return s.copy(), mask
    scale = np.where(mask, k, 1.0)
    if s.ndim == 2:
        scale = scale[:, None]
    return s + rng.normal(size=s.shape) * scale * sigma, mask


def seasonal(t, amplitudes, phases, period) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    m = np.arange(1, len(amplitudes) + 1)
    return (np.asarray(amplitudes)[None, :]
            * np.cos(2 * np.pi * m[None, :] * t[:, None] / period + np.asarray(phases)[None, :])).sum(axis=1)


def structural_switch(length: int, period: float, harmonics: int, change_points, sigma: float,
                      rng: np.random.Generator, amp_bounds=(0.5, 1.5), amplitudes=None, phases=None,
                      benchmark_grid: bool = False):
    """Piecewise-stationary seasonal series with redrawn harmonics after each change point.

    Amplitudes are redrawn as ``U(amp_bounds) x`` the original, phases
    uniformly in [0, 2pi). There is no constant term, so every segment keeps
    mean zero. Returns ``(series, change_points, draws)``.
    """
    cps = [int(c) for c in change_points]
    if any(b <= a for a, b in zip(cps, cps[1:])) or any(not 0 < c < length for c in cps):
        raise ShiftError("change points must be strictly increasing inside (0, length)")
    if benchmark_grid and len(cps) not in (2, 3):
        raise ShiftError("the benchmark grid uses 2 or 3 change points")
    amps0 = np.asarray(amplitudes if amplitudes is not None else 1.0 / np.arange(1, harmonics + 1), dtype=float)
    ph0 = np.asarray(phases if phases is not None else rng.uniform(0, 2 * np.pi, harmonics), dtype=float)
    bounds = [0] + cps + [length]
    t = np.arange(length)
    out = np.empty(length)
    draws = []
    amps, ph = amps0, ph0
    for j, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        if j > 0:
            amps = amps0 * rng.uniform(amp_bounds[0], amp_bounds[1], harmonics)
            ph = rng.uniform(0, 2 * np.pi, harmonics)
        draws.append({"start": a, "amplitudes": amps.tolist(), "phases": ph.tolist()})
        out[a:b] = seasonal(t[a:b], amps, ph, period)
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, length)
    return out, cps, draws


def fit_harmonics(x, period, harmonics):
    """Least-squares amplitudes and phases of a mean-removed channel."""
    x = np.asarray(x, dtype=float)
    t = np.arange(len(x))
    cols = []
    for m in range(1, harmonics + 1):
        w = 2 * np.pi * m * t / period
        cols += [np.cos(w), np.sin(w)]
    A = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(A, x - x.mean(), rcond=None)
    a, b = coef[0::2], coef[1::2]
    # a cos + b sin = R cos(w + phi) with R = hypot(a, b), phi = atan2(-b, a)
    return np.hypot(a, b), np.arctan2(-b, a)


def apply_structural(series, period, harmonics, change_points, rng, sigma=0.0, amp_bounds=(0.5, 1.5),
                     benchmark_grid=False):
    """Swap each channel's fitted seasonal component for a switching one."""
    s = np.asarray(series, dtype=float)
    two_d = s.ndim == 2
    s2 = s if two_d else s[:, None]
    out = np.empty_like(s2)
    meta = []
    for c in range(s2.shape[1]):
        amps, ph = fit_harmonics(s2[:, c], period, harmonics)
        orig = seasonal(np.arange(len(s2)), amps, ph, period)
        new, cps, draws = structural_switch(len(s2), period, harmonics, change_points, 0.0, rng,
                                            amp_bounds, amps, ph, benchmark_grid)
        noise = rng.normal(0.0, sigma, len(s2)) if np.any(np.asarray(sigma) > 0) else 0.0
        out[:, c] = s2[:, c] - orig + new + noise
        meta.append(draws)
    return (out if two_d else out[:, 0]), meta


def calibrate_sigma(train_values, period: int) -> np.ndarray:
    """Residual std per channel after removing a trailing moving average of width ``period``."""
    x = np.asarray(train_values, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) <= period:
        raise ShiftError("training range shorter than the smoothing period")
    kernel = np.ones(period) / period
    res = []
    for c in range(x.shape[1]):
        trend = np.convolve(x[:, c], kernel, mode="valid")
        res.append((x[period - 1:, c] - trend).std())
    return np.array(res)


@dataclass
class ShiftResult:
    values: np.ndarray
    metadata: dict = field(default_factory=dict)


def apply_shift(values, segment: tuple[int, int], spec: ShiftSpec, train_values) -> ShiftResult:
    """Apply ``spec`` to rows ``[start, stop)`` of a ``(T, d)`` array; other rows pass through."""
    values = np.asarray(values, dtype=float)
    start, stop = segment
    if not 0 <= start < stop <= len(values):
        raise ShiftError("shift segment outside the series")
    rng = np.random.default_rng(spec.seed)
    seg = values[start:stop]
    train_values = np.asarray(train_values, dtype=float)
    train_std = train_values.std(axis=0)
    out = values.copy()
    meta = {"spec": spec.to_dict(), "segment": [int(start), int(stop)]}
    if spec.kind == "gradual":
        if spec.kappa is None or spec.nu is None:
            lo, hi = DRIFT_BAND
            if not lo <= spec.drift_rate <= hi:
                raise ShiftError(f"drift rate must lie in [{lo}, {hi}]")
            kappa, nu = calibrate_gradual(seg, train_std, spec.drift_rate)
        else:
            kappa, nu = np.asarray(spec.kappa, dtype=float), np.asarray(spec.nu, dtype=float)
        out[start:stop] = gradual_drift(seg, kappa, nu, spec.mu0)
        meta.update(kappa=np.atleast_1d(kappa).tolist(), nu=np.atleast_1d(nu).tolist())
    elif spec.kind == "noise":
        sigma = spec.sigma if spec.sigma is not None else calibrate_sigma(train_values, spec.period)
        segs = sample_segments(stop - start, spec.n_segments, rng, spec.segment_min, spec.segment_max)
        out[start:stop], mask = noise_inflation(seg, spec.k, segs, sigma, rng, spec.segment_min, spec.segment_max)
        meta.update(sigma_base=np.atleast_1d(sigma).tolist(),
                    segments=[[start + a, b] for a, b in segs],
                    mask_rows=int(mask.sum()))
    else:
        length = stop - start
        cps = np.sort(rng.choice(np.arange(1, length), size=spec.n_change_points, replace=False))
        sigma = spec.sigma if spec.sigma is not None else 0.0
        out[start:stop], draws = apply_structural(seg, spec.period, spec.harmonics, cps.tolist(), rng, sigma,
                                                  spec.amp_bounds)
        meta.update(change_points=[int(start + c) for c in cps], draws=draws)
    return ShiftResult(out, meta)
