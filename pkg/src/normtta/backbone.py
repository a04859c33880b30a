"""Multi-scale residual TCN with temporal batch normalization.

Everything is plain numpy in float64. The forward pass caches what the
hand-written backward pass needs; at test time only the BN affine
parameters (gamma, beta) receive gradients.

Array shapes follow (batch, time, channels) throughout.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    """Input shape does not match the architecture."""


class NonFiniteInputError(ValueError):
    def __init__(self, index: int):
        super().__init__(f"non-finite values in window {index}")
        self.index = index


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Architecture:
    in_features: int
    window: int
    hidden: int = 64
    blocks: int = 3
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 4)
    convs_per_block: int = 2

    def __post_init__(self):
        if len(self.dilations) != self.blocks:
            raise ValueError("need one dilation per block")
        if self.kernel < 1 or self.hidden < 1 or self.convs_per_block < 1:
            raise ValueError("kernel, hidden and convs_per_block must be positive")

    @property
    def receptive_field(self) -> int:
        return 1 + self.convs_per_block * (self.kernel - 1) * sum(self.dilations)


@dataclass(frozen=True)
class TaskHead:
    kind: str = "regression"  # "classification" | "regression"
    horizon: int = 1

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def out_dim(self) -> int:
        return 2 if self.kind == "classification" else self.horizon


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 512
    max_epochs: int = 50
    patience: int = 5
    weight_decay: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("bad batch size / epoch count")


@dataclass
class BackboneParams:
    """All network arrays, keyed by name.

    BN layers store ``gamma``, ``beta`` (adaptable) and ``mean``, ``var``
    (running statistics; the running std is ``sqrt(var + eps)``).
    """

    arch: Architecture
    head: TaskHead
    arrays: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)

    def copy(self) -> "BackboneParams":
        return BackboneParams(
            self.arch,
            self.head,
            {k: v.copy() for k, v in self.arrays.items()},
            copy.deepcopy(self.meta),
        )

    def bn_names(self) -> list[str]:
        return bn_layer_names(self.arch)

    def phi_keys(self) -> list[str]:
        keys = []
        for name in self.bn_names():
            keys += [f"{name}.gamma", f"{name}.beta"]
        return keys

    def get_phi(self) -> np.ndarray:
        return np.concatenate([self.arrays[k] for k in self.phi_keys()])

    def set_phi(self, phi: np.ndarray) -> None:
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape != (self.phi_dim,):
            raise DimensionError(f"phi has shape {phi.shape}, expected ({self.phi_dim},)")
        i = 0
        for k in self.phi_keys():
            n = self.arrays[k].size
            self.arrays[k] = phi[i:i + n].copy()
            i += n

    @property
    def phi_dim(self) -> int:
        return sum(self.arrays[k].size for k in self.phi_keys())

    def running_std(self, name: str) -> np.ndarray:
        return np.sqrt(self.arrays[f"{name}.var"] + BN_EPS)


def bn_layer_names(arch: Architecture) -> list[str]:
    return [f"block{b}.bn{j}" for b in range(arch.blocks) for j in range(arch.convs_per_block)]


def init_params(arch: Architecture, head: TaskHead, seed: int = 0) -> BackboneParams:
    """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    c_in = arch.in_features
    for b in range(arch.blocks):
        block_in = c_in
        for j in range(arch.convs_per_block):
            fan_in = arch.kernel * c_in
            arrays[f"block{b}.conv{j}.weight"] = uniform((arch.kernel, c_in, arch.hidden), fan_in)
            arrays[f"block{b}.conv{j}.bias"] = uniform((arch.hidden,), fan_in)
            arrays[f"block{b}.bn{j}.gamma"] = np.ones(arch.hidden)
            arrays[f"block{b}.bn{j}.beta"] = np.zeros(arch.hidden)
            arrays[f"block{b}.bn{j}.mean"] = np.zeros(arch.hidden)
            arrays[f"block{b}.bn{j}.var"] = np.ones(arch.hidden)
            c_in = arch.hidden
        if block_in != arch.hidden:
            arrays[f"block{b}.proj.weight"] = uniform((block_in, arch.hidden), block_in)
            arrays[f"block{b}.proj.bias"] = uniform((arch.hidden,), block_in)
    arrays["head.weight"] = uniform((arch.hidden, head.out_dim), arch.hidden)
    arrays["head.bias"] = uniform((head.out_dim,), arch.hidden)
    return BackboneParams(arch, head, arrays)


# ---------------------------------------------------------------------------
# layer primitives


def bn_apply(u, mu, sigma, gamma, beta):
    """Per-channel affine batch norm. Returns ``(h, y)``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(~(sigma > 0)):
        raise FloatingPointError("BN std must be > 0 after the variance floor")
    h = (u - mu) / sigma
    return h, gamma * h + beta


def grad_bn_affine(upstream, h):
    """Gradients of the BN affine map w.r.t. (gamma, beta), per channel.

    Sums over every axis but the last (batch and time positions).
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if upstream.shape != h.shape:
        raise DimensionError(f"upstream {upstream.shape} vs h {h.shape}")
    axes = tuple(range(upstream.ndim - 1))
    return (upstream * h).sum(axis=axes), upstream.sum(axis=axes)


def causal_conv(x, w, b, dilation):
    """Left-padded dilated conv. ``x`` (N, L, Cin), ``w`` (k, Cin, Cout)."""
    k = w.shape[0]
    pad = (k - 1) * dilation
    n, length, _ = x.shape
    xp = np.concatenate([np.zeros((n, pad, x.shape[2])), x], axis=1) if pad else x
    out = np.broadcast_to(b, (n, length, w.shape[2])).copy()
    for j in range(k):
        out += xp[:, j * dilation:j * dilation + length, :] @ w[j]
    return out, xp


def causal_conv_backward(dout, xp, w, dilation, need_weights=True):
    k = w.shape[0]
    pad = (k - 1) * dilation
    length = dout.shape[1]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w) if need_weights else None
    d2 = dout.reshape(-1, dout.shape[2])
    for j in range(k):
        sl = slice(j * dilation, j * dilation + length)
        dxp[:, sl, :] += dout @ w[j].T
        if need_weights:
            dw[j] = xp[:, sl, :].reshape(-1, xp.shape[2]).T @ d2
    db = d2.sum(axis=0) if need_weights else None
    return dxp[:, pad:, :], dw, db


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dp, p):
    """Map dL/dp to dL/dz for p = softmax(z), row-wise."""
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardResult:
    output: np.ndarray  # probabilities (N, 2) or regression values (N, H)
    logits: np.ndarray  # raw head output
    normalized: dict[str, np.ndarray]  # h per BN layer
    batch_stats: dict[str, tuple[np.ndarray, np.ndarray]]  # (mean, var) per BN layer, batch mode only
    cache: dict[str, Any]


def _check_batch(arch: Architecture, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (arch.window, arch.in_features):
        raise DimensionError(
            f"batch shape {x.shape} does not match (N, {arch.window}, {arch.in_features})"
        )
    bad = ~np.isfinite(x).all(axis=(1, 2))
    if bad.any():
        raise NonFiniteInputError(int(np.argmax(bad)))
    return x


def forward(params: BackboneParams, batch, bn_mode: str = "running") -> ForwardResult:
    """Run the network on a batch of windows.

    ``bn_mode="running"`` normalizes with the stored running statistics;
    ``bn_mode="batch"`` uses the current batch's per-channel moments over
    (batch x time).
    """
    if bn_mode not in ("running", "batch"):
        raise ValueError(f"bn_mode must be 'running' or 'batch', got {bn_mode!r}")
    arch, a = params.arch, params.arrays
    x = _check_batch(arch, batch)
    cache: dict[str, Any] = {"x": x, "bn_mode": bn_mode}
    normalized, stats = {}, {}
    cur = x
    for b in range(arch.blocks):
        block_in = cur
        for j in range(arch.convs_per_block):
            name = f"block{b}.bn{j}"
            u, xp = causal_conv(cur, a[f"block{b}.conv{j}.weight"], a[f"block{b}.conv{j}.bias"],
                                arch.dilations[b])
            if bn_mode == "batch":
                mu_b = u.mean(axis=(0, 1))
                var_b = ((u - mu_b) ** 2).mean(axis=(0, 1))
                stats[name] = (mu_b, var_b)
                mu, sigma = mu_b, np.sqrt(var_b + BN_EPS)
            else:
                mu, sigma = a[f"{name}.mean"], np.sqrt(a[f"{name}.var"] + BN_EPS)
            h, y = bn_apply(u, mu, sigma, a[f"{name}.gamma"], a[f"{name}.beta"])
            normalized[name] = h
            cache[f"block{b}.conv{j}.xp"] = xp
            cache[f"{name}.sigma"] = sigma
            if j == arch.convs_per_block - 1:
                if f"block{b}.proj.weight" in a:
                    res = block_in @ a[f"block{b}.proj.weight"] + a[f"block{b}.proj.bias"]
                else:
                    res = block_in
                y = y + res
                cache[f"block{b}.in"] = block_in
            cur = np.maximum(y, 0.0)
            cache[f"{name}.relu_mask"] = y > 0
    pooled = cur.mean(axis=1)
    logits = pooled @ a["head.weight"] + a["head.bias"]
    cache["pooled"] = pooled
    cache["length"] = cur.shape[1]
    out = softmax(logits) if params.head.kind == "classification" else logits
    return ForwardResult(out, logits, normalized, stats, cache)


def backward(params: BackboneParams, fwd: ForwardResult, dlogits, phi_only: bool = False):
    """Backpropagate dL/dlogits. Returns a dict of gradients keyed like ``params.arrays``.

    With ``phi_only`` the weight gradients of convolutions, projections and
    the head are skipped; only BN gamma/beta gradients are returned.
    """
    if fwd is None or not fwd.cache:
        raise RuntimeError("backward needs the cache of a forward pass on the same batch")
    arch, a, cache = params.arch, params.arrays, fwd.cache
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != fwd.logits.shape:
        raise DimensionError(f"output gradient {dlogits.shape} vs logits {fwd.logits.shape}")
    batch_mode = cache["bn_mode"] == "batch"
    grads: dict[str, np.ndarray] = {}
    if not phi_only:
        grads["head.weight"] = cache["pooled"].T @ dlogits
        grads["head.bias"] = dlogits.sum(axis=0)
    dpooled = dlogits @ a["head.weight"].T
    dcur = np.broadcast_to(dpooled[:, None, :] / cache["length"],
                           (dpooled.shape[0], cache["length"], dpooled.shape[1]))
    for b in reversed(range(arch.blocks)):
        dres = None
        for j in reversed(range(arch.convs_per_block)):
            name = f"block{b}.bn{j}"
            dy = dcur * cache[f"{name}.relu_mask"]
            if j == arch.convs_per_block - 1:
                dres = dy
            h = fwd.normalized[name]
            g_gamma, g_beta = grad_bn_affine(dy, h)
            grads[f"{name}.gamma"] = g_gamma
            grads[f"{name}.beta"] = g_beta
            dh = dy * a[f"{name}.gamma"]
            sigma = cache[f"{name}.sigma"]
            if batch_mode:
                du = (dh - dh.mean(axis=(0, 1)) - h * (dh * h).mean(axis=(0, 1))) / sigma
            else:
                du = dh / sigma
            dcur, dw, db = causal_conv_backward(du, cache[f"block{b}.conv{j}.xp"],
                                                a[f"block{b}.conv{j}.weight"],
                                                arch.dilations[b], need_weights=not phi_only)
            if not phi_only:
                grads[f"block{b}.conv{j}.weight"] = dw
                grads[f"block{b}.conv{j}.bias"] = db
        block_in = cache[f"block{b}.in"]
        if f"block{b}.proj.weight" in a:
            if not phi_only:
                grads[f"block{b}.proj.weight"] = (block_in.reshape(-1, block_in.shape[2]).T
                                                  @ dres.reshape(-1, dres.shape[2]))
                grads[f"block{b}.proj.bias"] = dres.sum(axis=(0, 1))
            if b > 0:
                dcur = dcur + dres @ a[f"block{b}.proj.weight"].T
        elif b > 0:
            dcur = dcur + dres
    return grads


def backward_to_bn(params: BackboneParams, fwd: ForwardResult, dlogits) -> np.ndarray:
    """Flat gradient over the BN affine subset, ordered like ``params.get_phi()``."""
    grads = backward(params, fwd, dlogits, phi_only=True)
    return np.concatenate([grads[k] for k in params.phi_keys()])


def predict(params: BackboneParams, batch, bn_mode: str = "running", chunk: int = 2048) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    outs = [forward(params, x[i:i + chunk], bn_mode).output for i in range(0, len(x), chunk)]
    return np.concatenate(outs) if outs else np.empty((0, params.head.out_dim))


# ---------------------------------------------------------------------------
# supervised training


class AdamW:
    def __init__(self, lr, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p = arrays[k]
            p *= 1 - self.lr * self.wd
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def supervised_loss(head: TaskHead, fwd: ForwardResult, labels):
    """Mean cross-entropy or MSE, and its gradient w.r.t. the logits."""
    n = fwd.logits.shape[0]
    if head.kind == "classification":
        y = np.asarray(labels).astype(int).reshape(-1)
        p = np.clip(fwd.output[np.arange(n), y], 1e-12, 1.0)
        loss = float(-np.log(p).mean())
        d = fwd.output.copy()
        d[np.arange(n), y] -= 1.0
        return loss, d / n
    y = np.asarray(labels, dtype=np.float64).reshape(n, -1)
    diff = fwd.logits - y
    return float((diff ** 2).mean()), 2.0 * diff / diff.size


def _validation_metric(params, head, dataset) -> float:
    out = predict(params, dataset.inputs)
    if head.kind == "classification":
        from .evalstat import auc_score

        auc = auc_score(out[:, 1], np.asarray(dataset.labels).reshape(-1))
        return -0.5 if np.isnan(auc) else -auc  # lower is better
    y = np.asarray(dataset.labels, dtype=np.float64).reshape(out.shape)
    return float(((out - y) ** 2).mean())


def train_supervised(train, valid, head: TaskHead, cfg: TrainConfig,
                     arch: Architecture | None = None) -> BackboneParams:
    """Train every parameter with AdamW and keep the best validation checkpoint.

    ``train``/``valid`` need ``inputs`` (N, L, d) and ``labels``. Early stopping
    watches validation AUC (classification) or MSE (regression). The history
    and best metric are stored in ``params.meta``.
    """
    n = len(train.inputs)
    if n == 0 or len(valid.inputs) == 0:
        raise ValueError("empty dataset")
    if arch is None:
        _, length, d = np.shape(train.inputs)
        arch = Architecture(in_features=d, window=length)
    params = init_params(arch, head, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = AdamW(cfg.lr, cfg.weight_decay)
    bn_names = params.bn_names()
    stat_keys = {f"{nm}.{s}" for nm in bn_names for s in ("mean", "var")}
    best = params.copy()
    best_metric = _validation_metric(params, head, valid)
    history = [{"epoch": 0, "train_loss": None, "valid_metric": best_metric}]
    bad_epochs = 0
    x_all, y_all = train.inputs, np.asarray(train.labels)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[start:start + cfg.batch_size])
            if len(idx) < 2:
                continue
            fwd = forward(params, x_all[idx], bn_mode="batch")
            loss, dlogits = supervised_loss(head, fwd, y_all[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = backward(params, fwd, dlogits)
            opt.step(params.arrays, {k: g for k, g in grads.items() if k not in stat_keys})
            for nm in bn_names:
                mu_b, var_b = fwd.batch_stats[nm]
                params.arrays[f"{nm}.mean"] = (1 - BN_MOMENTUM) * params.arrays[f"{nm}.mean"] + BN_MOMENTUM * mu_b
                params.arrays[f"{nm}.var"] = (1 - BN_MOMENTUM) * params.arrays[f"{nm}.var"] + BN_MOMENTUM * var_b
            losses.append(loss)
        metric = _validation_metric(params, head, valid)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "valid_metric": metric})
        logger.info("epoch %d train_loss %.6g valid %.6g", epoch, np.mean(losses), metric)
        if metric < best_metric:
            best_metric, best, bad_epochs = metric, params.copy(), 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    best.meta = {
        "best_metric": float(best_metric if head.kind == "regression" else -best_metric),
        "metric_name": "valid_mse" if head.kind == "regression" else "valid_auc",
        "epochs_run": history[-1]["epoch"],
        "history": history,
        "train_config": asdict(cfg),
    }
    return best


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: BackboneParams, scaler=None, seed: int | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(params.arch),
        "head": asdict(params.head),
        "meta": params.meta,
        "seed": seed,
        "keys": list(params.arrays),
    }
    payload = {f"a/{k}": v for k, v in params.arrays.items()}
    if scaler is not None:
        payload["scaler/mean"] = scaler.mean
        payload["scaler/std"] = scaler.std
        meta["scaler_channels"] = list(scaler.channels)
    payload["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Returns ``(params, scaler_or_None, seed)``."""
    with np.load(Path(path)) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        arch_d = dict(meta["arch"])
        arch_d["dilations"] = tuple(arch_d["dilations"])
        arrays = {k: z[f"a/{k}"].copy() for k in meta["keys"]}
        scaler = None
        if "scaler_channels" in meta:
            from .data import Scaler

            scaler = Scaler(tuple(meta["scaler_channels"]), z["scaler/mean"].copy(), z["scaler/std"].copy())
    params = BackboneParams(Architecture(**arch_d), TaskHead(**meta["head"]), arrays, meta["meta"])
    return params, scaler, meta["seed"]
