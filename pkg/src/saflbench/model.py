"""Desk-scale classifiers with exact analytic gradients.

Two architectures are supported:

* ``softmax``: logits = x @ W + b
* ``mlp``: logits = relu(x @ W1 + b1) @ W2 + b2

Parameters live in one flat float64 vector.  The layout is the weight matrix
(row-major, ``fan_in x fan_out``) followed by its bias, layer by layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .seeding import STREAM_INIT, make_rng

ARCHITECTURES = ("softmax", "mlp")


class ModelError(ValueError):
    """Raised on dimension or spec mismatches."""


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_dim: int
    num_classes: int
    hidden_width: int | None = None

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ModelError(f"unknown architecture {self.architecture!r}")
        if self.input_dim < 1:
            raise ModelError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ModelError("num_classes must be >= 2")
        if self.architecture == "mlp":
            if self.hidden_width is None or self.hidden_width < 1:
                raise ModelError("mlp requires hidden_width >= 1")
        elif self.hidden_width is not None:
            raise ModelError("hidden_width only applies to the mlp architecture")

    @classmethod
    def softmax(cls, input_dim: int, num_classes: int) -> ModelSpec:
        return cls("softmax", input_dim, num_classes)

    @classmethod
    def mlp(cls, input_dim: int, num_classes: int, hidden_width: int) -> ModelSpec:
        return cls("mlp", input_dim, num_classes, hidden_width)

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for each dense layer, input to output."""
        if self.architecture == "softmax":
            return [(self.input_dim, self.num_classes)]
        return [(self.input_dim, self.hidden_width), (self.hidden_width, self.num_classes)]


def parameter_count(spec: ModelSpec) -> int:
    return sum(fan_in * fan_out + fan_out for fan_in, fan_out in spec.layer_shapes())


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 parameters (or a gradient) tied to a model spec."""

    values: np.ndarray
    spec: ModelSpec

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ModelError("parameter values must be a flat vector")
        expected = parameter_count(self.spec)
        if values.shape[0] != expected:
            raise ModelError(f"parameter vector has length {values.shape[0]}, spec needs {expected}")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.values, other.values)

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), self.spec)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views of (weight, bias) per layer."""
        out = []
        offset = 0
        for fan_in, fan_out in self.spec.layer_shapes():
            w = self.values[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.values[offset : offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out


def zeros(spec: ModelSpec) -> ParamVector:
    return ParamVector(np.zeros(parameter_count(spec)), spec)


def _check_same_spec(a: ParamVector, b: ParamVector) -> None:
    if a.spec != b.spec:
        raise ModelError(f"spec mismatch: {a.spec} vs {b.spec}")


@dataclass(frozen=True, eq=False)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ModelError("features must be a 2-D matrix")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ModelError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if x.shape[0] < 1:
            raise ModelError("batch must hold at least one row")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    if batch.features.shape[1] != spec.input_dim:
        raise ModelError(f"batch has {batch.features.shape[1]} features, model expects {spec.input_dim}")
    if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
        raise ModelError("batch label outside [0, num_classes)")


def init_model(spec: ModelSpec, seed: int) -> ParamVector:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
    rng = make_rng(seed, STREAM_INIT)
    params = zeros(spec)
    for w, _ in params.layers():
        bound = 1.0 / math.sqrt(w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return params


def _forward(params: ParamVector, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits plus the post-activation input of every layer (for backprop)."""
    layers = params.layers()
    inputs = [x]
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(z, 0.0)
            inputs.append(h)
        else:
            h = z
    return h, inputs


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward_eval(params: ParamVector, batch: Batch) -> tuple[float, int]:
    """Mean cross-entropy and number of correct argmax predictions.

    Argmax ties go to the lowest class index.  Non-finite parameters give a
    non-finite loss rather than an exception.
    """
    _check_batch(params.spec, batch)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        logits, _ = _forward(params, batch.features)
        logp = _log_softmax(logits)
        n = len(batch)
        loss = float(-logp[np.arange(n), batch.labels].mean())
        correct = int(np.count_nonzero(np.argmax(logits, axis=1) == batch.labels))
    return loss, correct


def backward(params: ParamVector, batch: Batch) -> ParamVector:
    """Gradient of the mean cross-entropy with respect to ``params``."""
    _check_batch(params.spec, batch)
    grad = zeros(params.spec)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        logits, inputs = _forward(params, batch.features)
        n = len(batch)
        delta = np.exp(_log_softmax(logits))
        delta[np.arange(n), batch.labels] -= 1.0
        delta /= n
        layers = params.layers()
        grad_layers = grad.layers()
        for i in range(len(layers) - 1, -1, -1):
            gw, gb = grad_layers[i]
            gw[...] = inputs[i].T @ delta
            gb[...] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ layers[i][0].T) * (inputs[i] > 0.0)
    return grad


def sgd_step(params: ParamVector, grad: ParamVector, eta: float) -> ParamVector:
    _check_same_spec(params, grad)
    return ParamVector(params.values - eta * grad.values, params.spec)


def numerical_gradient(params: ParamVector, batch: Batch, epsilon: float = 1e-5) -> ParamVector:
    """Central-difference gradient of the ``forward_eval`` loss, one coordinate at a time."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    grad = zeros(params.spec)
    probe = params.copy()
    for k in range(len(params)):
        original = probe.values[k]
        probe.values[k] = original + epsilon
        up, _ = forward_eval(probe, batch)
        probe.values[k] = original - epsilon
        down, _ = forward_eval(probe, batch)
        probe.values[k] = original
        grad.values[k] = (up - down) / (2.0 * epsilon)
    return grad


def clip_gradient(grad: ParamVector, max_norm: float) -> ParamVector:
    """Project ``grad`` onto the L2 ball of radius ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = grad.norm()
    # A few ulps of slack so that re-clipping an already clipped vector is a no-op.
    if norm <= max_norm * (1.0 + 8.0 * np.finfo(np.float64).eps):
        return grad
    return ParamVector(grad.values * (max_norm / norm), grad.spec)
