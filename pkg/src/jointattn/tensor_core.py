"""Dense float64 primitives, parameter storage and the SGD-momentum update.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64.
Every layer in the package is written against the small set of helpers here
and carries its own hand-written backward pass; there is no autodiff graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

DTYPE = np.float64
RNG_ALGORITHM = "PCG64"
CHECKPOINT_FORMAT = "jointattn-params"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range."""


class StateError(RuntimeError):
    """A backward pass was requested without a matching forward cache."""


class NormalizationError(ArithmeticError):
    """A zero vector was passed to L2 normalization."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim != 2:
        raise DimensionError(f"expected a matrix, got array of shape {a.shape}")
    return a


def as_vector(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim != 1:
        raise DimensionError(f"expected a vector, got array of shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(x, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.size == 0 or x.shape[axis] == 0:
        raise ValueError("softmax of an empty input")
    z = x - np.max(x, axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / np.sum(ez, axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient w.r.t. the softmax input given its output ``p`` and upstream ``dp``."""
    return p * (dp - np.sum(p * dp, axis=axis, keepdims=True))


def log_softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``.

    ``logits`` is ``(N, C)`` or ``(N, T, C)``; in the latter case each sample's
    label applies to all of its T positions. Returns ``(loss, dloss/dlogits)``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    lp = log_softmax(logits, axis=-1)
    lab = np.broadcast_to(labels.reshape(labels.shape + (1,) * (logits.ndim - 1 - labels.ndim)),
                          logits.shape[:-1])[..., None]
    picked = np.take_along_axis(lp, lab, axis=-1)
    n = picked.size
    grad = np.exp(lp)
    np.put_along_axis(grad, lab, np.take_along_axis(grad, lab, axis=-1) - 1.0, axis=-1)
    return float(-picked.sum() / n), grad / n


def tanh_map(x) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=DTYPE))


def sigmoid(x) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=DTYPE)))


def l2_normalize(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(norm == 0.0):
        raise NormalizationError("cannot L2-normalize a zero vector")
    return x / norm


@dataclass(eq=False)
class Param:
    """A learnable array with gradient and momentum buffers of the same shape."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    momentum: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.value = np.array(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.grad.fill(0.0)


def sgd_momentum_step(params: Iterable[Param], lr: float, momentum: float) -> None:
    """``buf <- momentum * buf + grad``; ``value <- value - lr * buf``.

    Gradients are left in place; call :func:`zero_grads` before the next
    backward pass.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
    for p in params:
        p.momentum *= momentum
        p.momentum += p.grad
        p.value -= lr * p.momentum


def make_rng(seed: int) -> np.random.Generator:
    """The package-wide PRNG: numpy's PCG64 seeded with a 64-bit integer."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))


def params_to_dict(params: Iterable[Param]) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "params": {
            p.name: {"shape": list(p.shape), "values": p.value.ravel().tolist()}
            for p in params
        },
    }


def load_params_dict(params: Mapping[str, Param], payload: Mapping) -> None:
    """Copy values from a checkpoint payload into existing Params, checking shapes."""
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"not a parameter checkpoint: format={payload.get('format')!r}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')!r}")
    stored = payload["params"]
    missing = set(params) - set(stored)
    extra = set(stored) - set(params)
    if missing or extra:
        raise ConfigError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, p in params.items():
        entry = stored[name]
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise DimensionError(f"param {name}: checkpoint shape {shape} != model shape {p.shape}")
        p.value[...] = np.asarray(entry["values"], dtype=DTYPE).reshape(shape)


def save_params(params: Iterable[Param], path: str | Path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params)))
