"""Pluggable small-model zoo: three MLP capacity tiers, backprop, FedAvg.

Models are value-like: parameters live in one flat float64 vector, training
returns a fresh model, and nothing here holds hidden state. The tier layout
stands in for the three backbone depths of the reference setting; the
build/forward/train surface is the extension point for richer architectures.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConsistencyError,
    FormatError,
    IncompatibleArchitectureError,
    InvalidInputError,
    ShapeError,
    TruncatedFileError,
)
from .numerics import KdConfig, LossBreakdown, log_softmax_rows, softmax_rows

Array = np.ndarray

CHECKPOINT_MAGIC = "HKSMODEL"
CHECKPOINT_VERSION = "v1"


class CapacityTier(str, Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"

    @classmethod
    def for_client(cls, client_id: int) -> "CapacityTier":
        """Mod-3 capacity assignment over the client index."""
        return (cls.SMALL, cls.MEDIUM, cls.LARGE)[client_id % 3]


TIER_HIDDEN: dict[CapacityTier, tuple[int, ...]] = {
    CapacityTier.SMALL: (32,),
    CapacityTier.MEDIUM: (64, 32),
    CapacityTier.LARGE: (128, 64, 32),
}


@dataclass(frozen=True)
class Model:
    """Fully-connected ReLU network with a flat parameter vector.

    layer_dims runs input -> hidden... -> class count; params holds, per
    layer, the (in_dim x out_dim) weight block row-major followed by the
    out_dim bias block.
    """

    architecture_id: str
    layer_dims: tuple[int, ...]
    params: Array
    seed: int

    @property
    def n_params(self) -> int:
        return param_count(self.layer_dims)

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]


def param_count(layer_dims: Sequence[int]) -> int:
    return sum((i + 1) * o for i, o in zip(layer_dims[:-1], layer_dims[1:]))


def architecture_id(layer_dims: Sequence[int]) -> str:
    return "mlp-" + "-".join(str(d) for d in layer_dims)


def layer_dims_from_architecture_id(arch: str) -> tuple[int, ...]:
    prefix, _, dims = arch.partition("-")
    if prefix != "mlp" or not dims:
        raise FormatError(f"unrecognized architecture id {arch!r}")
    return tuple(int(d) for d in dims.split("-"))


def _layer_slices(layer_dims: Sequence[int]):
    """Yield (weight_slice, bias_slice, in_dim, out_dim) per layer."""
    off = 0
    for i, o in zip(layer_dims[:-1], layer_dims[1:]):
        w = slice(off, off + i * o)
        b = slice(off + i * o, off + i * o + o)
        off = b.stop
        yield w, b, i, o


def build_model(tier: CapacityTier, input_dim: int, n_classes: int, seed: int) -> Model:
    """Deterministic Glorot-uniform MLP for the given tier.

    Every parameter (weights and biases) of a layer is drawn uniformly from
    [-a, a] with a = sqrt(6 / (fan_in + fan_out)).
    """
    if input_dim < 1 or n_classes < 1:
        raise InvalidInputError("input_dim and class count must be >= 1")
    dims = (input_dim, *TIER_HIDDEN[CapacityTier(tier)], n_classes)
    rng = np.random.default_rng(seed)
    parts = []
    for i, o in zip(dims[:-1], dims[1:]):
        a = np.sqrt(6.0 / (i + o))
        parts.append(rng.uniform(-a, a, size=(i + 1) * o))
    return Model(architecture_id(dims), dims, np.concatenate(parts), seed)


def _forward_acts(m: Model, X: Array) -> tuple[Array, list[Array], list[Array]]:
    """Batched forward pass keeping pre/post activations for backprop."""
    pre: list[Array] = []
    post: list[Array] = []
    H = X
    layers = list(_layer_slices(m.layer_dims))
    for li, (ws, bs, i, o) in enumerate(layers):
        W = m.params[ws].reshape(i, o)
        b = m.params[bs]
        A = H @ W + b
        if li < len(layers) - 1:
            pre.append(A)
            H = np.maximum(A, 0.0)
            post.append(H)
        else:
            return A, pre, post
    raise AssertionError("model has no layers")


def forward_batch(m: Model, X: Array) -> Array:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.input_dim:
        raise ShapeError(f"expected (B, {m.input_dim}) inputs, got {X.shape}")
    Z, _, _ = _forward_acts(m, X)
    return Z


def forward(m: Model, x: Array) -> Array:
    """Logits for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != m.input_dim:
        raise ShapeError(f"expected input of length {m.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("input contains non-finite values")
    return forward_batch(m, x[None, :])[0]


def _teacher_rows(entry, n_classes: int) -> Array | None:
    """Normalize one sample's teacher entry to a (k, C) matrix or None."""
    if entry is None:
        return None
    if isinstance(entry, np.ndarray) and entry.ndim == 1:
        entry = [entry]
    rows = [np.asarray(t, dtype=np.float64) for t in entry]
    if not rows:
        return None
    T = np.stack(rows)
    if T.shape[1] != n_classes:
        raise ShapeError(f"teacher logits have {T.shape[1]} classes, model has {n_classes}")
    return T


def batch_loss_terms(
    m: Model,
    X: Array,
    y: Array,
    teachers: Sequence | None,
    cfg: KdConfig,
) -> tuple[LossBreakdown, Array, list[Array], list[Array]]:
    """Loss breakdown plus the activations needed to backpropagate it.

    The batch loss is mean cross-entropy plus alpha_kd times the mean
    per-sample distillation loss; a sample with several teacher entries
    (one per cluster level) averages its KD losses over them, and a sample
    with no teacher contributes zero KD.
    """
    B = X.shape[0]
    Z, pre, post = _forward_acts(m, X)
    log_p = log_softmax_rows(Z)
    ce = float(-log_p[np.arange(B), y].mean())
    kd = 0.0
    if teachers is not None:
        if len(teachers) != B:
            raise ShapeError(f"teacher list length {len(teachers)} != batch size {B}")
        T = cfg.temperature
        scale = T * T if cfg.t_squared_scaling else 1.0
        log_qs = log_softmax_rows(Z / T)
        for i in range(B):
            rows = _teacher_rows(teachers[i], m.n_classes)
            if rows is None:
                continue
            log_qt = log_softmax_rows(rows / T)
            q_t = np.exp(log_qt)
            kls = (q_t * (log_qt - log_qs[i])).sum(axis=1)
            kd += scale * float(np.maximum(kls, 0.0).mean())
        kd /= B
    total = ce + cfg.alpha_kd * kd
    return LossBreakdown(ce=ce, kd=kd, total=total), Z, pre, post


def batch_loss(m: Model, X: Array, y: Array, teachers: Sequence | None, cfg: KdConfig) -> float:
    bd, _, _, _ = batch_loss_terms(m, X, y, teachers, cfg)
    return bd.total


def batch_loss_and_grad(
    m: Model,
    X: Array,
    y: Array,
    teachers: Sequence | None,
    cfg: KdConfig,
) -> tuple[LossBreakdown, Array, Array]:
    """Batch loss, its gradient w.r.t. the flat parameter vector, and logits."""
    B = X.shape[0]
    bd, Z, pre, post = batch_loss_terms(m, X, y, teachers, cfg)

    dZ = softmax_rows(Z)
    dZ[np.arange(B), y] -= 1.0
    dZ /= B
    if teachers is not None and cfg.alpha_kd != 0.0:
        T = cfg.temperature
        scale = T * T if cfg.t_squared_scaling else 1.0
        q_s = softmax_rows(Z, T)
        for i in range(B):
            rows = _teacher_rows(teachers[i], m.n_classes)
            if rows is None:
                continue
            q_t_mean = softmax_rows(rows / T).mean(axis=0)
            dZ[i] += (cfg.alpha_kd / B) * (scale / T) * (q_s[i] - q_t_mean)

    grads = np.zeros_like(m.params)
    layers = list(_layer_slices(m.layer_dims))
    delta = dZ
    for li in range(len(layers) - 1, -1, -1):
        ws, bs, i, o = layers[li]
        A_prev = post[li - 1] if li > 0 else X
        grads[ws] = (A_prev.T @ delta).ravel()
        grads[bs] = delta.sum(axis=0)
        if li > 0:
            W = m.params[ws].reshape(i, o)
            delta = (delta @ W.T) * (pre[li - 1] > 0.0)
    return bd, grads, Z


def train_step(
    m: Model,
    X: Array,
    y: Array,
    teachers: Sequence | None,
    cfg: KdConfig,
    lr: float,
) -> tuple[Model, LossBreakdown, Array]:
    """One SGD step on the batch-mean loss; returns (model, losses, logits)."""
    bd, grads, Z = batch_loss_and_grad(m, X, y, teachers, cfg)
    new = replace(m, params=m.params - lr * grads)
    return new, bd, Z


def train_batch(
    m: Model,
    batch: Sequence[tuple[Array, int]],
    teacher: Sequence | None,
    cfg: KdConfig,
    lr: float,
) -> tuple[Model, LossBreakdown]:
    """Train on a list of (x, y) pairs with optional index-aligned teachers."""
    if not batch:
        raise InvalidInputError("batch must be nonempty")
    X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    y = np.asarray([int(t) for _, t in batch])
    new, bd, _ = train_step(m, X, y, teacher, cfg, lr)
    return new, bd


def aggregate_weights(sizes: Sequence[int]) -> Array:
    """FedAvg weights proportional to client dataset sizes."""
    s = np.asarray(sizes, dtype=np.float64)
    if np.any(s < 0) or s.sum() <= 0:
        raise InvalidInputError("sizes must be nonnegative with positive total")
    return s / s.sum()


def fedavg_aggregate(models: Sequence[Model], weights: Array) -> Model:
    """Weighted parameter average; requires a homogeneous architecture."""
    if not models:
        raise InvalidInputError("no models to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if len(models) != w.shape[0]:
        raise ShapeError(f"{len(models)} models but {w.shape[0]} weights")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise InvalidInputError("weights must be nonnegative and sum to 1")
    first = models[0]
    for m in models[1:]:
        if m.architecture_id != first.architecture_id or m.params.shape != first.params.shape:
            raise IncompatibleArchitectureError(
                f"cannot average {m.architecture_id} into {first.architecture_id}"
            )
    params = np.zeros_like(first.params)
    for m, wk in zip(models, w):
        params += wk * m.params
    return replace(first, params=params)


def save_model(m: Model, path: str | Path) -> None:
    """Checkpoint: one header line, then the flat little-endian float64 params."""
    with open(path, "wb") as f:
        header = f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {m.architecture_id} {m.n_params}\n"
        f.write(header.encode("ascii"))
        f.write(m.params.astype("<f8").tobytes())


def load_model(path: str | Path, seed: int = 0) -> Model:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").strip()
        fields = header.split(" ")
        if len(fields) != 4 or fields[0] != CHECKPOINT_MAGIC or fields[1] != CHECKPOINT_VERSION:
            raise FormatError(f"bad checkpoint header {header!r}")
        arch, count = fields[2], int(fields[3])
        dims = layer_dims_from_architecture_id(arch)
        if param_count(dims) != count:
            raise ConsistencyError(f"header count {count} does not match architecture {arch}")
        raw = f.read(count * 8)
        if len(raw) != count * 8:
            raise TruncatedFileError(f"expected {count * 8} payload bytes, got {len(raw)}")
        params = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return Model(arch, dims, params, seed)
