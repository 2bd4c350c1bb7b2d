"""Classifier head: FC -> batch norm -> FC -> sigmoid, trained with masked BCE and Adam.

Backbone features come in as plain vectors; everything here is numpy with
hand-written gradients.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .metrics import DegenerateLabels, roc_auc

LEARNABLE = ("W1", "b1", "gamma", "beta", "W2", "b2")
FIELDS = ("W1", "b1", "gamma", "beta", "running_mean", "running_var", "W2", "b2")
BCE_EPS = 1e-7


class HeadError(ValueError):
    pass


class DimensionMismatch(HeadError):
    pass


class UninitializedBatchNorm(HeadError):
    pass


class EpochOutOfRange(HeadError):
    pass


class EmptySet(HeadError):
    pass


@dataclass
class HeadParams:
    W1: np.ndarray  # (hidden, in)
    b1: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    W2: np.ndarray  # (out, hidden)
    b2: np.ndarray
    stats_ready: bool = False

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.W1.shape[1], self.W1.shape[0], self.W2.shape[0]

    @classmethod
    def init(cls, n_in: int = 1408, n_hidden: int = 512, n_out: int = 5, seed: int = 0) -> "HeadParams":
        """Glorot-uniform weights, zero biases, identity batch norm."""
        rng = np.random.default_rng(seed)
        a1 = math.sqrt(6.0 / (n_in + n_hidden))
        a2 = math.sqrt(6.0 / (n_hidden + n_out))
        return cls(
            W1=rng.uniform(-a1, a1, (n_hidden, n_in)),
            b1=np.zeros(n_hidden),
            gamma=np.ones(n_hidden),
            beta=np.zeros(n_hidden),
            running_mean=np.zeros(n_hidden),
            running_var=np.ones(n_hidden),
            W2=rng.uniform(-a2, a2, (n_out, n_hidden)),
            b2=np.zeros(n_out),
        )

    def copy(self) -> "HeadParams":
        return replace(self, **{k: getattr(self, k).copy() for k in FIELDS})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in FIELDS}

    def validate(self) -> None:
        n_in, n_h, n_out = self.dims
        want = {
            "W1": (n_h, n_in), "b1": (n_h,), "gamma": (n_h,), "beta": (n_h,),
            "running_mean": (n_h,), "running_var": (n_h,), "W2": (n_out, n_h), "b2": (n_out,),
        }
        for k, shape in want.items():
            if getattr(self, k).shape != shape:
                raise DimensionMismatch(f"{k} has shape {getattr(self, k).shape}, expected {shape}")
        for k in FIELDS:
            if not np.all(np.isfinite(getattr(self, k))):
                raise HeadError(f"{k} contains non-finite values")
        if np.any(self.running_var < 0):
            raise HeadError("running_var must be non-negative")

    def __eq__(self, other):
        if not isinstance(other, HeadParams):
            return NotImplemented
        return self.stats_ready == other.stats_ready and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in FIELDS
        )


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_input(params: HeadParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.dims[0]:
        raise DimensionMismatch(f"features of shape {X.shape} do not fit a head with input dim {params.dims[0]}")
    return X


@dataclass
class _Cache:
    X: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    a: np.ndarray
    z: np.ndarray
    p: np.ndarray
    batch_mean: np.ndarray
    batch_var: np.ndarray


def _forward_batch(params: HeadParams, X: np.ndarray, eps: float) -> _Cache:
    h = X @ params.W1.T + params.b1
    mu = h.mean(axis=0)
    var = ((h - mu) ** 2).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (h - mu) * inv_std
    a = params.gamma * xhat + params.beta
    z = a @ params.W2.T + params.b2
    return _Cache(X, xhat, inv_std, a, z, sigmoid(z), mu, var)


def _update_running(params: HeadParams, c: _Cache, momentum: float) -> None:
    n = c.X.shape[0]
    unbiased = c.batch_var * n / (n - 1) if n > 1 else c.batch_var
    params.running_mean[:] = (1 - momentum) * params.running_mean + momentum * c.batch_mean
    params.running_var[:] = (1 - momentum) * params.running_var + momentum * unbiased
    params.stats_ready = True


def forward(
    params: HeadParams,
    X,
    mode: Literal["train", "infer"] = "infer",
    bn_momentum: float = 0.1,
    bn_eps: float = 1e-5,
) -> tuple[np.ndarray, np.ndarray]:
    """Return (probabilities, logits) for a batch of feature vectors.

    Train mode normalizes with batch statistics and updates the running
    statistics in place; infer mode reads the running statistics only.
    """
    X = _check_input(params, X)
    if mode == "train":
        if X.shape[0] == 1:
            warnings.warn("batch of one in train mode: batch-norm variance is zero", stacklevel=2)
        c = _forward_batch(params, X, bn_eps)
        _update_running(params, c, bn_momentum)
        return c.p, c.z
    if mode != "infer":
        raise ValueError(f"unknown mode {mode!r}")
    if not params.stats_ready:
        raise UninitializedBatchNorm("inference needs running statistics; train at least one step first")
    h = X @ params.W1.T + params.b1
    xhat = (h - params.running_mean) / np.sqrt(params.running_var + bn_eps)
    z = (params.gamma * xhat + params.beta) @ params.W2.T + params.b2
    return sigmoid(z), z


def predict(params: HeadParams, X, bn_eps: float = 1e-5) -> np.ndarray:
    return forward(params, X, "infer", bn_eps=bn_eps)[0]


def bce_masked(probs, target, mask=None) -> float:
    """Mean BCE over the masked-in labels of one sample; 0 if none are."""
    p = np.clip(np.asarray(probs, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(target, dtype=np.float64)
    m = np.ones_like(p) if mask is None else np.asarray(mask, dtype=np.float64)
    count = m.sum()
    if count == 0:
        return 0.0
    ll = y * np.log(p) + (1.0 - y) * np.log(1.0 - p)
    return float(-(m * ll).sum() / count)


def batch_loss(probs: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mean over samples of the per-sample masked BCE."""
    p = np.clip(probs, BCE_EPS, 1.0 - BCE_EPS)
    ll = target * np.log(p) + (1.0 - target) * np.log(1.0 - p)
    count = mask.sum(axis=1)
    per = np.where(count > 0, -(mask * ll).sum(axis=1) / np.maximum(count, 1), 0.0)
    return float(per.mean())


def loss_and_grads(
    params: HeadParams, X, target, mask, bn_eps: float = 1e-5
) -> tuple[float, dict[str, np.ndarray]]:
    """Batch-statistics loss and its analytic gradients for the learnable fields."""
    loss, grads, _ = _loss_grads(params, X, target, mask, bn_eps)
    return loss, grads


def _loss_grads(params, X, target, mask, bn_eps):
    X = _check_input(params, X)
    if X.shape[0] == 0:
        raise EmptySet("empty batch")
    target = np.asarray(target, dtype=np.float64).reshape(X.shape[0], -1)
    mask = np.asarray(mask, dtype=np.float64).reshape(X.shape[0], -1)
    if target.shape[1] != params.dims[2] or mask.shape != target.shape:
        raise DimensionMismatch(f"targets {target.shape} / mask {mask.shape} do not fit {params.dims[2]} outputs")
    c = _forward_batch(params, X, bn_eps)
    n = X.shape[0]
    count = mask.sum(axis=1, keepdims=True)
    weight = np.where(count > 0, mask / np.maximum(count, 1.0), 0.0) / n
    # clamped probabilities have zero slope
    live = (c.p > BCE_EPS) & (c.p < 1.0 - BCE_EPS)
    dz = weight * (c.p - target) * live
    grads = {
        "W2": dz.T @ c.a,
        "b2": dz.sum(axis=0),
    }
    da = dz @ params.W2
    grads["gamma"] = (da * c.xhat).sum(axis=0)
    grads["beta"] = da.sum(axis=0)
    dxhat = da * params.gamma
    dh = c.inv_std / n * (n * dxhat - dxhat.sum(axis=0) - c.xhat * (dxhat * c.xhat).sum(axis=0))
    grads["W1"] = dh.T @ X
    grads["b1"] = dh.sum(axis=0)
    return batch_loss(c.p, target, mask), grads, c


def backward(params: HeadParams, X, target, mask, bn_eps: float = 1e-5) -> dict[str, np.ndarray]:
    return loss_and_grads(params, X, target, mask, bn_eps)[1]


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: HeadParams, **kw) -> "AdamState":
        return cls(
            m={k: np.zeros_like(getattr(params, k)) for k in LEARNABLE},
            v={k: np.zeros_like(getattr(params, k)) for k in LEARNABLE},
            **kw,
        )


def adam_step(
    params: HeadParams, state: AdamState, grads: dict[str, np.ndarray], lr: float
) -> tuple[HeadParams, AdamState]:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new = params.copy()
    m_out, v_out = {}, {}
    for k in LEARNABLE:
        g = grads[k]
        if g.shape != getattr(params, k).shape or state.m[k].shape != g.shape:
            raise DimensionMismatch(f"shape mismatch for {k}: grad {g.shape}, param {getattr(params, k).shape}")
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        setattr(new, k, getattr(params, k) - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        m_out[k], v_out[k] = m, v
    return new, replace(state, m=m_out, v=v_out, step=t)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.003
    schedule: Literal["step", "cosine"] = "step"
    step_period: int = 10
    step_factor: float = 0.5
    t_max: int | None = None  # cosine period; defaults to epochs
    eta_min: float = 0.0
    batch_size: int = 128
    epochs: int = 100
    n_hidden: int = 512
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.schedule not in ("step", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def lr_at(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {config.epochs})")
    if config.schedule == "step":
        return config.lr0 * config.step_factor ** (epoch // config.step_period)
    t_max = config.t_max or config.epochs
    return config.eta_min + 0.5 * (config.lr0 - config.eta_min) * (1.0 + math.cos(math.pi * epoch / t_max))


@dataclass
class Checkpoint:
    epoch: int
    params: HeadParams
    mean_auc: float
    train_loss: float = float("nan")
    lr: float = float("nan")
    steps: int = 0


def mean_auc(probs: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Unweighted mean AUC over labels that have both classes among masked-in rows."""
    aucs = []
    for j in range(probs.shape[1]):
        keep = mask[:, j] > 0
        try:
            aucs.append(roc_auc(probs[keep, j], target[keep, j].astype(np.int64)))
        except DegenerateLabels:
            continue
    if not aucs:
        raise DegenerateLabels("no label has both classes in the validation set")
    return math.fsum(aucs) / len(aucs)


@dataclass
class Dataset:
    X: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if not (len(self.X) == len(self.target) == len(self.mask)):
            raise DimensionMismatch("features, targets and masks differ in length")

    def __len__(self) -> int:
        return len(self.X)


def train(train_set: Dataset, val_set: Dataset, config: TrainConfig = TrainConfig(), log=None) -> list[Checkpoint]:
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptySet("training and validation sets must be non-empty")
    n_in, n_out = train_set.X.shape[1], train_set.target.shape[1]
    if val_set.X.shape[1] != n_in or val_set.target.shape[1] != n_out:
        raise DimensionMismatch("train and validation sets have different dimensions")

    rng = np.random.default_rng(config.seed)
    params = HeadParams.init(n_in, config.n_hidden, n_out, seed=int(rng.integers(2**63)))
    state = AdamState.zeros_like(params)
    checkpoints = []
    n = len(train_set)
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = rng.permutation(n)
        losses, sizes = [], []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) == 1:
                warnings.warn("batch of one in train mode: batch-norm variance is zero", stacklevel=2)
            loss, grads, cache = _loss_grads(
                params, train_set.X[idx], train_set.target[idx], train_set.mask[idx], config.bn_eps
            )
            _update_running(params, cache, config.bn_momentum)
            params, state = adam_step(params, state, grads, lr)
            losses.append(loss)
            sizes.append(len(idx))
        probs = predict(params, val_set.X, config.bn_eps)
        ckpt = Checkpoint(
            epoch=epoch,
            params=params.copy(),
            mean_auc=mean_auc(probs, val_set.target, val_set.mask),
            train_loss=float(np.average(losses, weights=sizes)),
            lr=lr,
            steps=state.step,
        )
        checkpoints.append(ckpt)
        if log is not None:
            log(ckpt)
    return checkpoints


def select_best(checkpoints: list[Checkpoint]) -> Checkpoint:
    """Highest validation mean AUC; the earliest epoch wins ties."""
    if not checkpoints:
        raise EmptySet("no checkpoints to choose from")
    best = checkpoints[0]
    for c in checkpoints[1:]:
        if c.mean_auc > best.mean_auc:
            best = c
    return best


# --- checkpoint files ----------------------------------------------------

_CKPT_MAGIC = b"XRKHEAD\x00"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIIIIIId")  # magic, version, n_in, n_hidden, n_out, epoch, stats_ready, mean_auc


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    n_in, n_h, n_out = p.dims
    out = [_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, n_in, n_h, n_out, ckpt.epoch, int(p.stats_ready), ckpt.mean_auc)]
    for k in FIELDS:
        out.append(np.ascontiguousarray(getattr(p, k), dtype="<f8").tobytes())
    return b"".join(out)


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    magic, version, n_in, n_h, n_out, epoch, ready, auc_value = _CKPT_HEADER.unpack_from(buf)
    if magic != _CKPT_MAGIC:
        raise HeadError(f"not a head checkpoint (magic {magic!r})")
    if version != _CKPT_VERSION:
        raise HeadError(f"unsupported checkpoint version {version}")
    shapes = {
        "W1": (n_h, n_in), "b1": (n_h,), "gamma": (n_h,), "beta": (n_h,),
        "running_mean": (n_h,), "running_var": (n_h,), "W2": (n_out, n_h), "b2": (n_out,),
    }
    off = _CKPT_HEADER.size
    arrays = {}
    for k in FIELDS:
        count = int(np.prod(shapes[k]))
        arrays[k] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shapes[k])
        off += 8 * count
    if off != len(buf):
        raise HeadError(f"checkpoint has {len(buf) - off} trailing bytes")
    return Checkpoint(epoch=epoch, params=HeadParams(**arrays, stats_ready=bool(ready)), mean_auc=auc_value)
