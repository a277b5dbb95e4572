"""Loss/gradient engines and the FedAVG / FedSGD local and global updates.

Three model kinds share the flat-parameter interface:

``quadratic``
    ``f(w, sample) = 0.5 * ||w - c||^2``; data-independent, so every oracle
    is analytic and the optimum ``F* = 0`` is known.
``logistic``
    Softmax regression, parameters ``[W (C x d) row-major, b (C)]``.
``mlp``
    One tanh hidden layer then softmax, parameters
    ``[W1 (h x d), b1 (h), W2 (C x h), b2 (C)]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import NonFiniteError, as_param_vector, weighted_sum
from .datasets import SampleBatch

log = logging.getLogger(__name__)

KINDS = ("quadratic", "logistic", "mlp")


class DivergenceError(NonFiniteError):
    """A training iterate became non-finite."""


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    dim: int = 0
    num_classes: int = 2
    hidden: int = 0
    center: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {KINDS}")
        if self.kind == "quadratic":
            if self.center is None:
                raise ValueError("quadratic model needs a center")
            object.__setattr__(self, "center", as_param_vector(self.center, "center"))
            if self.center.size == 0:
                raise ValueError("quadratic center must be non-empty")
        else:
            if self.dim < 1 or self.num_classes < 2:
                raise ValueError("classification models need dim >= 1 and num_classes >= 2")
            if self.kind == "mlp" and self.hidden < 1:
                raise ValueError("mlp needs hidden >= 1")

    @property
    def q(self) -> int:
        d, c, h = self.dim, self.num_classes, self.hidden
        if self.kind == "quadratic":
            return self.center.size
        if self.kind == "logistic":
            return c * (d + 1)
        return h * d + h + c * h + c

    def init_params(self, rng: np.random.Generator, scale: float = 0.1) -> np.ndarray:
        if self.kind == "logistic":
            return np.zeros(self.q)
        return rng.normal(scale=scale, size=self.q)


@dataclass(frozen=True)
class LocalUpdateConfig:
    eta: float
    tau: int = 1
    batch_size: int = 32

    def __post_init__(self) -> None:
        if not self.eta >= 0:
            raise ValueError("learning rate must be nonnegative")
        if self.tau < 1 or self.batch_size < 1:
            raise ValueError("tau and batch_size must be >= 1")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _unpack_mlp(w: np.ndarray, model: ModelSpec):
    d, c, h = model.dim, model.num_classes, model.hidden
    i = 0
    w1 = w[i:i + h * d].reshape(h, d); i += h * d
    b1 = w[i:i + h]; i += h
    w2 = w[i:i + c * h].reshape(c, h); i += c * h
    b2 = w[i:i + c]
    return w1, b1, w2, b2


def _logits(w: np.ndarray, x: np.ndarray, model: ModelSpec):
    if model.kind == "logistic":
        c, d = model.num_classes, model.dim
        return x @ w[: c * d].reshape(c, d).T + w[c * d:], None
    w1, b1, w2, b2 = _unpack_mlp(w, model)
    hid = np.tanh(x @ w1.T + b1)
    return hid @ w2.T + b2, hid


def _check(w, data: SampleBatch, model: ModelSpec) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (model.q,):
        raise ValueError(f"parameter length {w.shape} does not match model size {model.q}")
    if len(data) == 0:
        raise ValueError("loss is undefined on an empty dataset")
    if model.kind != "quadratic" and data.dim != model.dim:
        raise ValueError(f"feature dim {data.dim} does not match model dim {model.dim}")
    return w


def local_loss(w, data: SampleBatch, model: ModelSpec) -> float:
    """Mean sample-wise loss of ``w`` over ``data``."""
    w = _check(w, data, model)
    if model.kind == "quadratic":
        r = w - model.center
        return 0.5 * float(r @ r)
    logits, _ = _logits(w, data.features, model)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(data)), data.labels].mean())


def local_gradient(w, data: SampleBatch, model: ModelSpec) -> np.ndarray:
    """Gradient of :func:`local_loss` with respect to ``w``."""
    w = _check(w, data, model)
    if model.kind == "quadratic":
        return w - model.center
    n = len(data)
    x, y = data.features, data.labels
    logits, hid = _logits(w, x, model)
    delta = np.exp(_log_softmax(logits))
    delta[np.arange(n), y] -= 1.0
    delta /= n
    if model.kind == "logistic":
        return np.concatenate([(delta.T @ x).ravel(), delta.sum(axis=0)])
    _, _, w2, _ = _unpack_mlp(w, model)
    g_w2 = delta.T @ hid
    g_b2 = delta.sum(axis=0)
    back = (delta @ w2) * (1.0 - hid**2)
    g_w1 = back.T @ x
    g_b1 = back.sum(axis=0)
    return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])


def predict(w, x: np.ndarray, model: ModelSpec) -> np.ndarray:
    if model.kind == "quadratic":
        raise ValueError("quadratic model has no predictions")
    logits, _ = _logits(np.asarray(w, dtype=np.float64), np.asarray(x, dtype=np.float64), model)
    return logits.argmax(axis=1)


def accuracy(w, data: SampleBatch, model: ModelSpec) -> float:
    if model.kind == "quadratic" or len(data) == 0:
        return float("nan")
    return float(np.mean(predict(w, data.features, model) == data.labels))


def fedavg_local_update(w_global, data: SampleBatch, cfg: LocalUpdateConfig, model: ModelSpec,
                        rng: np.random.Generator) -> np.ndarray:
    """Run ``tau`` mini-batch SGD steps from the global model.

    Each step draws a fresh batch without replacement; a batch as large as
    the dataset uses the full data directly.
    """
    w = as_param_vector(w_global, "global model").copy()
    n = len(data)
    if n == 0:
        raise ValueError("local update needs a non-empty dataset")
    b = cfg.batch_size
    if b > n:
        log.debug("batch size %d exceeds %d local samples; clamping", b, n)
        b = n
    for step in range(1, cfg.tau + 1):
        batch = data if b == n else data.take(rng.choice(n, size=b, replace=False))
        with np.errstate(over="ignore", invalid="ignore"):
            w = w - cfg.eta * local_gradient(w, batch, model)
        if not np.all(np.isfinite(w)):
            raise DivergenceError(f"local model became non-finite at local step {step}")
    return w


Aggregator = Callable[[Sequence[np.ndarray], np.ndarray], object]


def fedavg_global_update(local_models: Sequence[np.ndarray], weights,
                         aggregate: Aggregator | None = None) -> np.ndarray:
    """New global model: the channel's received aggregate, or the exact weighted sum."""
    if aggregate is None:
        return weighted_sum(local_models, weights)
    return as_param_vector(aggregate(local_models, np.asarray(weights)).received, "global model")


def fedsgd_global_update(w_prev, aggregated_grad, eta: float) -> np.ndarray:
    """One server-side gradient step ``w_prev - eta * aggregated_grad``."""
    w_prev = np.asarray(w_prev, dtype=np.float64)
    g = np.asarray(aggregated_grad, dtype=np.float64)
    if w_prev.shape != g.shape:
        raise ValueError(f"model length {w_prev.shape} vs gradient length {g.shape}")
    w = w_prev - eta * g
    if not np.all(np.isfinite(w)):
        raise DivergenceError("global model became non-finite")
    return w
