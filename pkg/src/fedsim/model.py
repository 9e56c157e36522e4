"""Softmax classifiers over dense feature vectors.

Two kinds are supported, both stored as one flat float64 parameter vector:

* ``linear``: multinomial logistic regression. Layout is a ``c x (d+1)``
  row-major matrix whose last column is the bias.
* ``one_hidden``: ``d -> h`` sigmoid layer, then ``h -> c`` softmax layer.
  Layout is the ``h x (d+1)`` first-layer matrix followed by the
  ``c x (h+1)`` output matrix, both row-major with the bias as last column.

FLOP counting model, used by every cost report in the package:

* dense layer forward, input width ``a`` (bias included), output ``b``,
  batch ``m``: ``2*a*b*m``
* softmax plus cross-entropy: ``5*c*m``
* backward pass: twice the forward matmul cost
* SGD parameter update: ``2*P``

Activations are not charged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import NumericError, ShapeError
from .rng import stream

Kind = Literal["linear", "one_hidden"]


@dataclass(frozen=True)
class ModelSpec:
    kind: Kind
    feature_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "one_hidden"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.feature_dim < 1 or self.num_classes < 1:
            raise ValueError("feature_dim and num_classes must be positive")
        if self.kind == "one_hidden" and self.hidden_dim < 1:
            raise ValueError("one_hidden models need hidden_dim >= 1")

    @property
    def num_params(self) -> int:
        d, c, h = self.feature_dim, self.num_classes, self.hidden_dim
        if self.kind == "linear":
            return c * (d + 1)
        return h * (d + 1) + c * (h + 1)

    def matmul_flops(self, m: int) -> int:
        """Forward dense-layer cost for a batch of ``m``."""
        d, c, h = self.feature_dim, self.num_classes, self.hidden_dim
        if self.kind == "linear":
            return 2 * (d + 1) * c * m
        return 2 * (d + 1) * h * m + 2 * (h + 1) * c * m

    def forward_flops(self, m: int) -> int:
        return self.matmul_flops(m) + 5 * self.num_classes * m

    def gradient_flops(self, m: int) -> int:
        return self.forward_flops(m) + 2 * self.matmul_flops(m)

    @property
    def update_flops(self) -> int:
        return 2 * self.num_params

    def as_dict(self) -> dict:
        return {"kind": self.kind, "feature_dim": self.feature_dim,
                "num_classes": self.num_classes, "hidden_dim": self.hidden_dim}


@dataclass(frozen=True)
class GradResult:
    grad: np.ndarray
    mean_loss: float
    flops: int


def init_params(spec: ModelSpec, init: str = "zeros", std: float = 0.01, seed: int = 0) -> np.ndarray:
    if init == "zeros":
        return np.zeros(spec.num_params)
    if init == "gaussian":
        return std * stream(seed, "init").standard_normal(spec.num_params)
    raise ValueError(f"unknown init {init!r}")


def _unpack(spec: ModelSpec, params: np.ndarray):
    if params.shape != (spec.num_params,):
        raise ShapeError(f"expected {spec.num_params} parameters, got shape {params.shape}")
    d, c, h = spec.feature_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "linear":
        return (params.reshape(c, d + 1),)
    split = h * (d + 1)
    return params[:split].reshape(h, d + 1), params[split:].reshape(c, h + 1)


def _check_batch(spec: ModelSpec, x: np.ndarray, y: np.ndarray | None):
    if x.ndim != 2 or x.shape[1] != spec.feature_dim:
        raise ShapeError(f"features must have shape (m, {spec.feature_dim}), got {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if y is not None and y.shape != (x.shape[0],):
        raise ShapeError(f"labels have shape {y.shape}, expected ({x.shape[0]},)")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward(spec, params, x):
    """Return logits and the hidden activations (None for linear)."""
    mats = _unpack(spec, params)
    if spec.kind == "linear":
        (w,) = mats
        return x @ w[:, :-1].T + w[:, -1], None
    w1, w2 = mats
    hidden = _sigmoid(x @ w1[:, :-1].T + w1[:, -1])
    return hidden @ w2[:, :-1].T + w2[:, -1], hidden


def _softmax_ce(logits, y):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1)
    losses = np.log(total) - shifted[np.arange(len(y)), y]
    return losses, exp / total[:, None]


def logits(spec: ModelSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    _check_batch(spec, x, None)
    return _forward(spec, params, x)[0]


def predict(spec: ModelSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(logits(spec, params, x), axis=1)


def forward_loss(spec: ModelSpec, params: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy (natural log), predicted classes, and FLOPs."""
    _check_batch(spec, x, y)
    z, _ = _forward(spec, params, x)
    losses, _ = _softmax_ce(z, y)
    loss = float(losses.mean())
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss, np.argmax(z, axis=1), spec.forward_flops(len(y))


def gradient(spec: ModelSpec, params: np.ndarray, x: np.ndarray, y: np.ndarray) -> GradResult:
    _check_batch(spec, x, y)
    m = len(y)
    z, hidden = _forward(spec, params, x)
    losses, probs = _softmax_ce(z, y)
    dz = probs
    dz[np.arange(m), y] -= 1.0
    dz /= m

    if spec.kind == "linear":
        grad = np.empty((spec.num_classes, spec.feature_dim + 1))
        grad[:, :-1] = dz.T @ x
        grad[:, -1] = dz.sum(axis=0)
        grad = grad.ravel()
    else:
        _, w2 = _unpack(spec, params)
        g2 = np.empty_like(w2)
        g2[:, :-1] = dz.T @ hidden
        g2[:, -1] = dz.sum(axis=0)
        dpre = (dz @ w2[:, :-1]) * hidden * (1.0 - hidden)
        g1 = np.empty((spec.hidden_dim, spec.feature_dim + 1))
        g1[:, :-1] = dpre.T @ x
        g1[:, -1] = dpre.sum(axis=0)
        grad = np.concatenate([g1.ravel(), g2.ravel()])

    loss = float(losses.mean())
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NumericError("non-finite loss or gradient")
    return GradResult(grad, loss, spec.gradient_flops(m))


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if params.shape != grad.shape:
        raise ShapeError(f"parameter shape {params.shape} != gradient shape {grad.shape}")
    return params - lr * grad


def accuracy_top1(spec: ModelSpec, params: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("accuracy of an empty sample set is undefined")
    return float(np.mean(predict(spec, params, x) == y))
