"""Weak, causality-preserving window transforms.

Every transform is a pure function of the window it is given: nothing
outside the window is read, and time order is kept.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("scale", "jitter", "time_shift", "cutout")

# named subsets used by the augmentation ablation
AUGMENTATION_SETS = {
    "scale": ("scale",),
    "scale+jitter": ("scale", "jitter"),
    "scale+jitter+cutout": ("scale", "jitter", "cutout"),
    "all": KINDS,
}

MAX_SCALE_RANGE = 0.05
MAX_JITTER_FRAC = 0.01
MAX_SHIFT = 1
MAX_CUTOUT = 5


@dataclass(frozen=True)
class TransformSpec:
    """One transform kind plus its ranges.

    The ``factor``, ``shift`` and ``cutout_len``/``cutout_start`` fields pin a
    draw; left as ``None`` they are sampled from the rng.
    """

    kind: str
    scale_range: float = MAX_SCALE_RANGE
    jitter_frac: float = MAX_JITTER_FRAC
    max_shift: int = MAX_SHIFT
    max_cutout: int = MAX_CUTOUT
    factor: float | None = None
    shift: int | None = None
    cutout_len: int | None = None
    cutout_start: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if not 0 <= self.scale_range <= MAX_SCALE_RANGE:
            raise ValueError(f"scale range must be within [0, {MAX_SCALE_RANGE}]")
        if not 0 <= self.jitter_frac <= MAX_JITTER_FRAC:
            raise ValueError(f"jitter fraction must be within [0, {MAX_JITTER_FRAC}]")
        if not 0 <= self.max_shift <= MAX_SHIFT:
            raise ValueError(f"time shift must be within +-{MAX_SHIFT}")
        if not 0 <= self.max_cutout <= MAX_CUTOUT:
            raise ValueError(f"cutout length must be within [0, {MAX_CUTOUT}]")
        if self.factor is not None and abs(self.factor - 1.0) > self.scale_range + 1e-12:
            raise ValueError("pinned scale factor outside 1 +- scale_range")
        if self.shift is not None and abs(self.shift) > self.max_shift:
            raise ValueError("pinned shift outside the allowed range")
        if self.cutout_len is not None and not 0 <= self.cutout_len <= self.max_cutout:
            raise ValueError("pinned cutout length outside the allowed range")


def _shift(x: np.ndarray, s: int) -> np.ndarray:
    # x (..., L, d); pads the vacated edge with the boundary value
    if s == 0:
        return x.copy()
    out = np.empty_like(x)
    if s > 0:
        out[..., s:, :] = x[..., :-s, :]
        out[..., :s, :] = x[..., :1, :]
    else:
        out[..., :s, :] = x[..., -s:, :]
        out[..., s:, :] = x[..., -1:, :]
    return out


def apply_transform(window, spec: TransformSpec, rng: np.random.Generator | None = None,
                    train_std=None) -> np.ndarray:
    """Apply one transform to a single L x d window."""
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("window must be L x d")
    if not np.isfinite(x).all():
        raise ValueError("window contains non-finite values")
    rng = rng if rng is not None else np.random.default_rng()
    L, d = x.shape
    if spec.kind == "scale":
        f = spec.factor if spec.factor is not None else rng.uniform(1 - spec.scale_range, 1 + spec.scale_range)
        return x * f
    if spec.kind == "jitter":
        if spec.jitter_frac == 0:
            return x.copy()
        std = np.ones(d) if train_std is None else np.asarray(train_std, dtype=np.float64)
        return x + rng.normal(size=x.shape) * (spec.jitter_frac * std)
    if spec.kind == "time_shift":
        s = spec.shift if spec.shift is not None else int(rng.integers(-spec.max_shift, spec.max_shift + 1))
        return _shift(x, s)
    # cutout
    n = spec.cutout_len if spec.cutout_len is not None else (
        int(rng.integers(1, spec.max_cutout + 1)) if spec.max_cutout > 0 else 0)
    n = min(n, L)
    if n == 0:
        return x.copy()
    start = spec.cutout_start if spec.cutout_start is not None else int(rng.integers(0, L - n + 1))
    if not 0 <= start <= L - n:
        raise ValueError("cutout span leaves the window")
    out = x.copy()
    out[start:start + n] = x.mean(axis=0)
    return out


def transform_batch(batch, kinds, rng: np.random.Generator, train_std=None) -> np.ndarray:
    """Compose the given transform kinds on every window of an (N, L, d) batch,
    with independent draws per window."""
    x = np.array(batch, dtype=np.float64)
    n, L, d = x.shape
    for kind in kinds:
        if kind == "scale":
            x *= rng.uniform(1 - MAX_SCALE_RANGE, 1 + MAX_SCALE_RANGE, size=(n, 1, 1))
        elif kind == "jitter":
            std = np.ones(d) if train_std is None else np.asarray(train_std, dtype=np.float64)
            x += rng.normal(size=x.shape) * (MAX_JITTER_FRAC * std)
        elif kind == "time_shift":
            s = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=n)
            x = np.where((s == 1)[:, None, None], _shift(x, 1),
                         np.where((s == -1)[:, None, None], _shift(x, -1), x))
        elif kind == "cutout":
            lengths = np.minimum(rng.integers(1, MAX_CUTOUT + 1, size=n), L)
            starts = (rng.random(n) * (L - lengths + 1)).astype(np.int64)
            t = np.arange(L)
            mask = (t[None, :] >= starts[:, None]) & (t[None, :] < (starts + lengths)[:, None])
            x = np.where(mask[:, :, None], x.mean(axis=1, keepdims=True), x)
        else:
            raise ValueError(f"unknown transform kind {kind!r}")
    return x


def resolve_set(name_or_kinds) -> tuple[str, ...]:
    if isinstance(name_or_kinds, str):
        if name_or_kinds not in AUGMENTATION_SETS:
            raise ValueError(f"unknown augmentation set {name_or_kinds!r}")
        return AUGMENTATION_SETS[name_or_kinds]
    kinds = tuple(name_or_kinds)
    for k in kinds:
        if k not in KINDS:
            raise ValueError(f"unknown transform kind {k!r}")
    return kinds
