"""Small differentiable classifiers with hand-written gradients.

Parameters live in a single flat float64 vector so client deltas can be
added and averaged without any structure handling.  Two architectures are
enough for desk-scale federated runs: multinomial (softmax) regression and
a one-hidden-layer rectifier network.  Losses are mean cross-entropy with a
log-sum-exp stabilized softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionMismatchError


@dataclass(frozen=True)
class SoftmaxRegressionSpec:
    n_features: int
    n_classes: int

    def __post_init__(self) -> None:
        if self.n_features < 1 or self.n_classes < 1:
            raise ValueError("model dimensions must be at least 1")


@dataclass(frozen=True)
class MlpSpec:
    """One hidden rectifier layer; subgradient 0 at the kink."""

    n_features: int
    hidden_width: int
    n_classes: int

    def __post_init__(self) -> None:
        if min(self.n_features, self.hidden_width, self.n_classes) < 1:
            raise ValueError("model dimensions must be at least 1")


ModelSpec = SoftmaxRegressionSpec | MlpSpec


def layer_dims(spec: ModelSpec) -> tuple[int, ...]:
    if isinstance(spec, SoftmaxRegressionSpec):
        return (spec.n_features, spec.n_classes)
    return (spec.n_features, spec.hidden_width, spec.n_classes)


def param_count(spec: ModelSpec) -> int:
    dims = layer_dims(spec)
    return sum(d_in * d_out + d_out for d_in, d_out in zip(dims, dims[1:]))


@dataclass
class ModelParams:
    """Flat parameter vector plus the layer sizes that give it shape."""

    values: np.ndarray
    layer_dims: tuple[int, ...]

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=float)
        self.values = arr
        expected = sum(
            d_in * d_out + d_out
            for d_in, d_out in zip(self.layer_dims, self.layer_dims[1:])
        )
        if arr.ndim != 1 or arr.size != expected:
            raise ValueError(
                f"parameter vector has length {arr.size}, layer dims {self.layer_dims} "
                f"need {expected}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("parameters must be finite")

    def copy(self) -> "ModelParams":
        return ModelParams(self.values.copy(), self.layer_dims)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    """Zero-mean gaussian weights scaled by 1/sqrt(fan_in); zero biases."""
    dims = layer_dims(spec)
    parts = []
    for d_in, d_out in zip(dims, dims[1:]):
        parts.append(rng.standard_normal(d_in * d_out) / np.sqrt(d_in))
        parts.append(np.zeros(d_out))
    return ModelParams(np.concatenate(parts), dims)


def _unpack(values: np.ndarray, dims: tuple[int, ...]) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    offset = 0
    for d_in, d_out in zip(dims, dims[1:]):
        w = values[offset : offset + d_in * d_out].reshape(d_in, d_out)
        offset += d_in * d_out
        b = values[offset : offset + d_out]
        offset += d_out
        layers.append((w, b))
    return layers


def _check_batch(spec: ModelSpec, features: np.ndarray, labels: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("batch must be a non-empty 2-d array")
    dims = layer_dims(spec)
    if features.shape[1] != dims[0]:
        raise DimensionMismatchError(
            f"batch has {features.shape[1]} features, model expects {dims[0]}"
        )
    if labels.shape != (features.shape[0],):
        raise DimensionMismatchError("labels must be one per batch row")
    if labels.min() < 0 or labels.max() >= dims[-1]:
        raise DataError(
            f"labels must lie in [0, {dims[-1]}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )


def _forward(params: ModelParams, spec: ModelSpec, features: np.ndarray):
    """Returns (logits, hidden activations or None, pre-activation or None)."""
    layers = _unpack(params.values, params.layer_dims)
    if isinstance(spec, SoftmaxRegressionSpec):
        w, b = layers[0]
        return features @ w + b, None, None
    (w1, b1), (w2, b2) = layers
    pre = features @ w1 + b1
    hidden = np.maximum(pre, 0.0)
    return hidden @ w2 + b2, hidden, pre


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def per_sample_losses(params: ModelParams, spec: ModelSpec, features, labels) -> np.ndarray:
    """Cross-entropy of each sample under the current parameters."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    _check_batch(spec, x, y)
    logits, _, _ = _forward(params, spec, x)
    return -_log_softmax(logits)[np.arange(y.size), y]


def loss_and_gradient(
    params: ModelParams, spec: ModelSpec, features, labels
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient, flat like the params."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    _check_batch(spec, x, y)
    m = x.shape[0]
    logits, hidden, pre = _forward(params, spec, x)
    log_probs = _log_softmax(logits)
    loss = float(-log_probs[np.arange(m), y].mean())

    d_logits = np.exp(log_probs)
    d_logits[np.arange(m), y] -= 1.0
    d_logits /= m

    if isinstance(spec, SoftmaxRegressionSpec):
        grad = np.concatenate([(x.T @ d_logits).ravel(), d_logits.sum(axis=0)])
        return loss, grad

    layers = _unpack(params.values, params.layer_dims)
    w2 = layers[1][0]
    g_w2 = hidden.T @ d_logits
    g_b2 = d_logits.sum(axis=0)
    d_hidden = (d_logits @ w2.T) * (pre > 0.0)
    g_w1 = x.T @ d_hidden
    g_b1 = d_hidden.sum(axis=0)
    grad = np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])
    return loss, grad


def evaluate(params: ModelParams, spec: ModelSpec, features, labels) -> tuple[float, float]:
    """(accuracy, mean loss); argmax ties resolve to the lowest class index."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    _check_batch(spec, x, y)
    logits, _, _ = _forward(params, spec, x)
    log_probs = _log_softmax(logits)
    accuracy = float((logits.argmax(axis=1) == y).mean())
    mean_loss = float(-log_probs[np.arange(y.size), y].mean())
    return accuracy, mean_loss
