"""Multilayer perceptron math: forward pass with failure masks, losses,
backpropagation and weight initialisation.

Layer ``l`` maps ``a[l-1]`` (length ``n[l-1]``) to ``a[l]`` through
``f(W[l] @ a[l-1] + b[l])``. Everything works on a single vector or a batch
with samples along axis 0. The dtype of the parameters sets the precision.

The forward pass accumulates each neuron's weighted sum sequentially in
ascending input order, starting from the bias. A neuron node running on its
own performs exactly the same float operations, so both produce bitwise
identical activations at the same precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ShapeError

HIDDEN_ACTIVATIONS = ("relu", "sigmoid")
OUTPUT_ACTIVATIONS = ("linear", "softmax")
LOSSES = ("mse", "cross_entropy")
CE_FLOOR = 1e-12


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("a network needs an input layer and at least one computing layer")
        if any(n < 1 for n in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        """Number of computing layers L (the input layer is not counted)."""
        return len(self.layer_sizes) - 1

    @property
    def hidden_layers(self) -> range:
        return range(1, self.n_layers)

    @property
    def hidden_units(self) -> list[tuple[int, int]]:
        return [(l, k) for l in self.hidden_layers for k in range(self.layer_sizes[l])]

    @property
    def n_hidden(self) -> int:
        return sum(self.layer_sizes[1:-1])

    def activation(self, layer: int) -> str:
        return self.output_activation if layer == self.n_layers else self.hidden_activation

    def neuron_activation(self, layer: int) -> str:
        """Activation a single node applies; softmax is finished by the collector."""
        act = self.activation(layer)
        return "linear" if act == "softmax" else act


REFERENCE_SPEC = NetworkSpec((10, 10, 10, 1), "relu", "linear")


@dataclass
class Parameters:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self) -> "Parameters":
        return Parameters([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "Parameters":
        return Parameters([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def tensors(self) -> Iterable[tuple[str, np.ndarray]]:
        for l, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            yield f"W{l}", w
            yield f"b{l}", b

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for _, t in self.tensors()])

    def with_flat(self, vec: np.ndarray) -> "Parameters":
        out = self.copy()
        pos = 0
        for _, t in out.tensors():
            t[...] = vec[pos:pos + t.size].reshape(t.shape)
            pos += t.size
        return out

    def check(self, spec: NetworkSpec) -> None:
        if len(self.weights) != spec.n_layers or len(self.biases) != spec.n_layers:
            raise ShapeError(f"expected {spec.n_layers} layers of parameters")
        for l in range(1, spec.n_layers + 1):
            want = (spec.layer_sizes[l], spec.layer_sizes[l - 1])
            if self.weights[l - 1].shape != want:
                raise ShapeError(f"W{l} has shape {self.weights[l - 1].shape}, expected {want}")
            if self.biases[l - 1].shape != (want[0],):
                raise ShapeError(f"b{l} has shape {self.biases[l - 1].shape}, expected {(want[0],)}")

    def equal(self, other: "Parameters") -> bool:
        return all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for (_, a), (_, b) in zip(self.tensors(), other.tensors())
        )


Gradient = Parameters


@dataclass
class ActivationRecord:
    """Activations ``a[0]..a[L]`` and pre-activations ``z[1]..z[L]`` (``z[0]`` is None)."""

    activations: list[np.ndarray]
    preactivations: list = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


def validate_failures(spec: NetworkSpec, failures, allow_output: bool = False) -> frozenset:
    """Return the failure set as a frozenset of ``(layer, neuron)`` pairs."""
    out = set()
    last = spec.n_layers if allow_output else spec.n_layers - 1
    for pair in failures or ():
        l, k = (int(v) for v in pair)
        if not 1 <= l <= last:
            raise ValueError(f"failure layer {l} outside 1..{last}")
        if not 0 <= k < spec.layer_sizes[l]:
            raise ValueError(f"failure neuron {k} outside layer {l} of size {spec.layer_sizes[l]}")
        out.add((l, k))
    return frozenset(out)


def activation_apply(kind: str, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    if kind == "relu":
        return np.where(z > 0, z, np.zeros((), dtype=z.dtype))
    if kind == "sigmoid":
        one = np.ones((), dtype=z.dtype)
        return one / (one + np.exp(-z))
    if kind == "linear":
        return z
    if kind == "softmax":
        e = np.exp(z - np.max(z, axis=-1, keepdims=True))
        return e / np.sum(e, axis=-1, keepdims=True)
    raise ValueError(f"unknown activation {kind!r}")


def activation_derivative(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "sigmoid":
        return a * (1 - a)
    if kind == "linear":
        return np.ones_like(z)
    raise ValueError(f"no elementwise derivative for {kind!r}")


def weighted_sum(weights: np.ndarray, bias, inputs: np.ndarray) -> np.ndarray:
    """``bias + sum_i weights[..., i] * inputs[..., i]`` accumulated in ascending ``i``.

    ``weights`` is (n_out, n_in) or (n_in,); ``inputs`` is (n_in,) or (N, n_in).
    """
    inputs = np.asarray(inputs)
    if weights.ndim == 1:
        s = np.broadcast_to(bias, inputs.shape[:-1]).astype(weights.dtype)
        for i in range(weights.shape[0]):
            s = s + weights[i] * inputs[..., i]
        return s
    s = np.broadcast_to(bias, inputs.shape[:-1] + bias.shape).astype(weights.dtype)
    for i in range(weights.shape[1]):
        s = s + inputs[..., i, None] * weights[:, i]
    return s


def _as_input(spec: NetworkSpec, params: Parameters, x) -> np.ndarray:
    x = np.asarray(x, dtype=params.dtype)
    if x.ndim not in (1, 2) or x.shape[-1] != spec.layer_sizes[0]:
        raise ShapeError(f"input shape {x.shape} does not match input dimension {spec.layer_sizes[0]}")
    return x


def forward(spec: NetworkSpec, params: Parameters, x, mask=None, allow_output_failures: bool = False) -> ActivationRecord:
    """Forward pass in which every failed ``(layer, neuron)`` emits exactly 0."""
    params.check(spec)
    x = _as_input(spec, params, x)
    failed = validate_failures(spec, mask, allow_output=allow_output_failures)
    by_layer: dict[int, list[int]] = {}
    for l, k in sorted(failed):
        by_layer.setdefault(l, []).append(k)

    acts = [x]
    pres = [None]
    a = x
    for l in range(1, spec.n_layers + 1):
        z = weighted_sum(params.weights[l - 1], params.biases[l - 1], a)
        a = activation_apply(spec.activation(l), z)
        if l in by_layer:
            a = np.array(a, copy=True)
            a[..., by_layer[l]] = 0
        pres.append(z)
        acts.append(a)
    return ActivationRecord(acts, pres)


def predict(spec: NetworkSpec, params: Parameters, x, mask=None) -> np.ndarray:
    return forward(spec, params, x, mask).output


def loss(kind: str, predictions, targets) -> float:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise ShapeError(f"predictions {p.shape} and targets {t.shape} differ in shape")
    if kind == "mse":
        return float(np.mean((t - p) ** 2))
    if kind == "cross_entropy":
        n = p.shape[0] if p.ndim > 1 else 1
        return float(-np.sum(t * np.log(np.maximum(p, CE_FLOOR))) / n)
    raise ValueError(f"unknown loss {kind!r}")


def _forward_train(spec, params, X, masks):
    """Batched forward with multiplicative hidden masks; uses BLAS matmul."""
    acts = [X]
    pres = [None]
    a = X
    for l in range(1, spec.n_layers + 1):
        z = a @ params.weights[l - 1].T + params.biases[l - 1]
        a = activation_apply(spec.activation(l), z)
        if masks is not None and l < spec.n_layers and masks[l - 1] is not None:
            a = a * masks[l - 1]
        pres.append(z)
        acts.append(a)
    return acts, pres


def backward(spec: NetworkSpec, params: Parameters, x, target, masks: Sequence | None = None,
             loss_kind: str = "mse") -> Gradient:
    """Gradient of the mean loss over the batch.

    ``masks`` holds one multiplier array per hidden layer, shaped (n_l,) or
    (N, n_l): 0 for a dropped or failed unit, 1 (or 1/keep_prob) otherwise.
    The ReLU derivative at exactly 0 is taken as 0.
    """
    params.check(spec)
    X = _as_input(spec, params, x)
    X = np.atleast_2d(X)
    Y = np.asarray(target, dtype=params.dtype).reshape(X.shape[0], spec.layer_sizes[-1])
    if masks is not None and len(masks) != spec.n_layers - 1:
        raise ShapeError(f"expected {spec.n_layers - 1} hidden masks, got {len(masks)}")
    masks = None if masks is None else [None if m is None else np.asarray(m, dtype=params.dtype) for m in masks]

    acts, pres = _forward_train(spec, params, X, masks)
    out = acts[-1]
    n = X.shape[0]
    L = spec.n_layers
    if loss_kind == "mse":
        dout = 2.0 * (out - Y) / (n * Y.shape[1])
        if spec.output_activation == "softmax":
            dz = out * (dout - np.sum(dout * out, axis=1, keepdims=True))
        else:
            dz = dout
    elif loss_kind == "cross_entropy":
        if spec.output_activation != "softmax":
            raise ValueError("cross_entropy needs a softmax output layer")
        # clamped log has zero gradient below the floor; ignored as it never binds in training
        dz = (out - Y) / n
    else:
        raise ValueError(f"unknown loss {loss_kind!r}")

    gw = [None] * L
    gb = [None] * L
    for l in range(L, 0, -1):
        gw[l - 1] = dz.T @ acts[l - 1]
        gb[l - 1] = dz.sum(axis=0)
        if l > 1:
            da = dz @ params.weights[l - 1]
            if masks is not None and masks[l - 2] is not None:
                da = da * masks[l - 2]
            h = activation_apply(spec.hidden_activation, pres[l - 1])
            dz = da * activation_derivative(spec.hidden_activation, pres[l - 1], h)
    return Gradient(gw, gb)


def init_params(spec: NetworkSpec, scheme: str = "he", rng=None, dtype=np.float64) -> Parameters:
    """Gaussian weights with variance 2/fan_in (he) or 2/(fan_in + fan_out) (xavier); zero biases."""
    from .rng import as_rng

    rng = as_rng(rng)
    weights, biases = [], []
    for l in range(1, spec.n_layers + 1):
        fan_in, fan_out = spec.layer_sizes[l - 1], spec.layer_sizes[l]
        if scheme == "he":
            var = 2.0 / fan_in
        elif scheme == "xavier":
            var = 2.0 / (fan_in + fan_out)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        weights.append(rng.normal((fan_out, fan_in), scale=np.sqrt(var)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return Parameters(weights, biases)


def save_params(path, spec: NetworkSpec, params: Parameters) -> None:
    """Store a network as an ``.npz`` archive at full precision."""
    params.check(spec)
    arrays = {name: t for name, t in params.tensors()}
    np.savez(path, layer_sizes=np.array(spec.layer_sizes), hidden_activation=spec.hidden_activation,
             output_activation=spec.output_activation, **arrays)


def load_params(path) -> tuple[NetworkSpec, Parameters]:
    with np.load(path) as z:
        spec = NetworkSpec(tuple(int(n) for n in z["layer_sizes"]), str(z["hidden_activation"]),
                           str(z["output_activation"]))
        params = Parameters([z[f"W{l}"] for l in range(1, spec.n_layers + 1)],
                            [z[f"b{l}"] for l in range(1, spec.n_layers + 1)])
    params.check(spec)
    return spec, params
