"""Dense network with inverted dropout, softmax output and SGD with momentum.

Parameters live in one flat float64 vector. The layout is layer-major: for
each layer the weight matrix of shape ``(fan_in, fan_out)`` in row-major
order, followed by its bias of length ``fan_out``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DomainError, NumericError, ShapeError
from .rng import make_rng

EPS = 1e-12

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass(frozen=True)
class NetSpec:
    layer_widths: tuple[int, ...]
    dropout_rate: float = 0.5
    activation: str = "tanh"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ShapeError("need at least an input and an output width")
        if any(w < 1 for w in widths):
            raise ShapeError(f"layer widths must be positive, got {widths}")
        if widths[-1] < 2:
            raise ShapeError("output width (class count) must be at least 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DomainError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def class_count(self) -> int:
        return self.layer_widths[-1]

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return self.layer_widths[1:-1]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    def unflatten(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` per layer into ``params``."""
        params = np.asarray(params)
        if params.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got shape {params.shape}")
        layers = []
        offset = 0
        for a, b in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            W = params[offset:offset + a * b].reshape(a, b)
            offset += a * b
            layers.append((W, params[offset:offset + b]))
            offset += b
        return layers


def init_params(spec: NetSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights and zero biases."""
    rng = make_rng(seed, "init")
    parts = []
    for a, b in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        limit = np.sqrt(6.0 / (a + b))
        parts.append(rng.uniform(-limit, limit, size=a * b))
        parts.append(np.zeros(b))
    return np.concatenate(parts)


class Deterministic:
    """Forward pass with dropout disabled."""

    def __repr__(self):
        return "DETERMINISTIC"


DETERMINISTIC = Deterministic()


@dataclass(frozen=True)
class DropoutSample:
    """Forward pass with a dropout mask drawn from ``seed``."""

    seed: int


ForwardMode = Union[Deterministic, DropoutSample]


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(kind: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - h * h
    return np.ones_like(z)


def dropout_masks(spec: NetSpec, n_rows: int, seed: int) -> list[np.ndarray]:
    """Inverted-dropout masks (already scaled by ``1/(1-rate)``), one per hidden layer."""
    rate = spec.dropout_rate
    rng = make_rng(seed, "dropout-mask")
    masks = []
    for width in spec.hidden_widths:
        keep = rng.random((n_rows, width)) >= rate
        masks.append(keep / (1.0 - rate))
    return masks


def _as_batch(spec: NetSpec, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"expected inputs of width {spec.input_dim}, got shape {np.shape(x)}")
    return X, single


def _masks_for(spec: NetSpec, mode: ForwardMode, n_rows: int):
    if isinstance(mode, DropoutSample) and spec.dropout_rate > 0.0 and spec.hidden_widths:
        return dropout_masks(spec, n_rows, mode.seed)
    return None


def forward_logits(spec: NetSpec, params: np.ndarray, X: np.ndarray, masks=None):
    """Logits plus the per-layer cache needed by backprop."""
    layers = spec.unflatten(params)
    a = X
    cache = []
    for i, (W, b) in enumerate(layers[:-1]):
        z = a @ W + b
        h = _activate(spec.activation, z)
        out = h * masks[i] if masks is not None else h
        cache.append((a, z, h))
        a = out
    W, b = layers[-1]
    cache.append((a, None, None))
    return a @ W + b, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward(spec: NetSpec, params: np.ndarray, x, mode: ForwardMode = DETERMINISTIC) -> np.ndarray:
    """Class probabilities for one input vector or a batch of rows."""
    X, single = _as_batch(spec, x)
    logits, _ = forward_logits(spec, params, X, _masks_for(spec, mode, X.shape[0]))
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite activation in forward pass")
    probs = softmax(logits)
    return probs[0] if single else probs


def cross_entropy(pred, label: int) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    if not 0 <= int(label) < pred.shape[-1]:
        raise DomainError(f"label {label} outside [0, {pred.shape[-1]})")
    return float(-np.log(max(pred[int(label)], EPS)))


def kl_divergence(student, target) -> float:
    """KL(target || student) with log-clamping at ``EPS``."""
    student = np.asarray(student, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if student.shape != target.shape:
        raise DomainError(f"length mismatch {student.shape} vs {target.shape}")
    mask = target > 0.0
    t = target[mask]
    val = float(np.sum(t * (np.log(np.maximum(t, EPS)) - np.log(np.maximum(student[mask], EPS)))))
    return max(val, 0.0)


LOSS_KINDS = ("ce", "kl")


def _target_matrix(kind: str, targets, n_rows: int, n_classes: int) -> np.ndarray:
    if kind == "ce":
        labels = np.asarray(targets)
        if labels.shape != (n_rows,):
            raise ShapeError(f"expected {n_rows} labels, got shape {labels.shape}")
        labels = labels.astype(np.int64)
        if labels.min() < 0 or labels.max() >= n_classes:
            raise DomainError("label outside class range")
        T = np.zeros((n_rows, n_classes))
        T[np.arange(n_rows), labels] = 1.0
        return T
    if kind == "kl":
        T = np.asarray(targets, dtype=np.float64)
        if T.shape != (n_rows, n_classes):
            raise ShapeError(f"expected targets of shape {(n_rows, n_classes)}, got {T.shape}")
        return T
    raise DomainError(f"unknown loss kind {kind!r}")


def _batch_loss_from_probs(kind: str, P: np.ndarray, T: np.ndarray) -> float:
    logp = np.log(np.maximum(P, EPS))
    per_row = -np.sum(T * logp, axis=1)
    if kind == "kl":
        per_row = per_row + np.sum(T * np.log(np.maximum(T, EPS)), axis=1)
    return float(np.mean(per_row))


def loss_and_grad(spec: NetSpec, params: np.ndarray, X, targets, kind: str,
                  dropout_seed: int | None = None) -> tuple[float, np.ndarray]:
    """Mean batch loss and its gradient.

    ``kind`` is ``"ce"`` (integer labels) or ``"kl"`` (rows of target
    probabilities, loss ``KL(target || prediction)``). With ``dropout_seed``
    the same masks as ``forward(..., DropoutSample(dropout_seed))`` are used.
    """
    X, _ = _as_batch(spec, X)
    n = X.shape[0]
    if n == 0:
        raise DomainError("empty batch")
    T = _target_matrix(kind, targets, n, spec.class_count)
    mode = DETERMINISTIC if dropout_seed is None else DropoutSample(dropout_seed)
    masks = _masks_for(spec, mode, n)
    logits, cache = forward_logits(spec, params, X, masks)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite activation in forward pass")
    P = softmax(logits)
    loss = _batch_loss_from_probs(kind, P, T)

    # d/dz of -sum_c t_c log max(p_c, eps); terms under the clamp have zero slope
    live = np.where(P > EPS, T, 0.0)
    dz = (P * live.sum(axis=1, keepdims=True) - live) / n

    layers = spec.unflatten(params)
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a_in = cache[i][0]
        grads.append((a_in.T @ dz).ravel())
        grads.append(dz.sum(axis=0))
        if i == 0:
            break
        da = dz @ W.T
        _, z, h = cache[i - 1]
        if masks is not None:
            da = da * masks[i - 1]
        dz = da * _activate_grad(spec.activation, z, h)
    # grads were appended as (W_L, b_L, W_{L-1}, b_{L-1}, ...)
    ordered = []
    for j in range(len(grads) - 2, -1, -2):
        ordered.append(grads[j])
        ordered.append(grads[j + 1])
    return loss, np.concatenate(ordered)


def backward(spec: NetSpec, params: np.ndarray, X, targets, kind: str,
             dropout_seed: int | None = None) -> np.ndarray:
    return loss_and_grad(spec, params, X, targets, kind, dropout_seed)[1]


def batch_loss(spec: NetSpec, params: np.ndarray, X, targets, kind: str,
               dropout_seed: int | None = None) -> float:
    X, _ = _as_batch(spec, X)
    if X.shape[0] == 0:
        raise DomainError("empty batch")
    T = _target_matrix(kind, targets, X.shape[0], spec.class_count)
    mode = DETERMINISTIC if dropout_seed is None else DropoutSample(dropout_seed)
    logits, _ = forward_logits(spec, params, X, _masks_for(spec, mode, X.shape[0]))
    return _batch_loss_from_probs(kind, softmax(logits), T)


@dataclass
class OptimState:
    momentum_buffer: np.ndarray
    learning_rate: float = 1e-4
    momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate < 0:
            raise DomainError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError("momentum must lie in [0, 1)")

    @classmethod
    def zeros(cls, n_params: int, learning_rate: float = 1e-4, momentum: float = 0.9) -> "OptimState":
        return cls(np.zeros(n_params), learning_rate, momentum)


def sgd_step(params: np.ndarray, grads: np.ndarray, opt: OptimState) -> tuple[np.ndarray, OptimState]:
    """buffer <- momentum * buffer + grads; params <- params - lr * buffer."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or opt.momentum_buffer.shape != params.shape:
        raise DomainError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"buffer {opt.momentum_buffer.shape}")
    buf = opt.momentum * opt.momentum_buffer + grads
    new_params = params - opt.learning_rate * buf
    return new_params, OptimState(buf, opt.learning_rate, opt.momentum)
