"""Mini-batch Adam training with inverted dropout on the hidden layers."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .exceptions import ConfigError, ShapeError, TrainingError
from .rng import Rng

_INIT_STREAM = 1
_SHUFFLE_STREAM = 2
_DROPOUT_STREAM = 3


@dataclass
class TrainConfig:
    eta: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 200
    # probability of DROPPING a hidden unit; keep_prob is derived, never stored
    drop_prob: float = 0.5
    dropout: bool = True
    init_scheme: str = "he"
    seed: int = 0
    precision: str = "float64"

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if not 0 <= self.drop_prob <= 1:
            raise ConfigError("drop_prob must lie in [0, 1]")
        if self.dropout and self.drop_prob >= 1:
            raise ConfigError("drop_prob = 1 drops every hidden unit; the network would be constant")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    @property
    def keep_prob(self) -> float:
        return 1.0 - self.drop_prob

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def echo(self) -> dict[str, object]:
        """Short key names used in logs and config files."""
        return {
            "eta": self.eta,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "batch": self.batch_size,
            "epochs": self.epochs,
            "drop_prob": self.drop_prob,
            "dropout": int(self.dropout),
            "init": self.init_scheme,
            "seed": self.seed,
            "precision": self.precision,
        }


@dataclass
class AdamState:
    m: nn.Parameters
    v: nn.Parameters
    t: int = 0

    @classmethod
    def zeros_like(cls, params: nn.Parameters) -> "AdamState":
        zeros = nn.Parameters([np.zeros_like(w) for w in params.weights],
                              [np.zeros_like(b) for b in params.biases])
        return cls(zeros, zeros.copy(), 0)


@dataclass
class TrainingLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float | None] = field(default_factory=list)
    wall_time: float = 0.0
    seed: int = 0
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.train_loss)

    def to_csv(self) -> str:
        lines = ["# " + ",".join(f"{k}={v}" for k, v in self.config.items())]
        lines.append("epoch,train_loss,val_loss")
        for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            lines.append(f"{i},{tr!r},{'' if va is None else repr(va)}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def sample_masks(spec: nn.NetworkSpec, keep_prob: float, rng: Rng, n_samples: int | None = None,
                 dtype=np.float64) -> list[np.ndarray]:
    """Inverted-dropout multipliers, one array per hidden layer.

    Kept units carry ``1/keep_prob`` and dropped ones 0. With ``n_samples``
    every sample gets its own row.
    """
    if not 0 <= keep_prob <= 1:
        raise ConfigError("keep_prob must lie in [0, 1]")
    if keep_prob == 0:
        raise ConfigError("keep_prob = 0 drops every hidden unit; the network would be constant")
    rows = 1 if n_samples is None else n_samples
    u = rng.random((rows, spec.n_hidden))
    scale = np.dtype(dtype).type(1.0 / keep_prob)
    block = np.where(u < keep_prob, scale, 0).astype(dtype)
    masks, pos = [], 0
    for l in spec.hidden_layers:
        n = spec.layer_sizes[l]
        part = block[:, pos:pos + n]
        masks.append(part[0].copy() if n_samples is None else part.copy())
        pos += n
    return masks


def adam_step(params: nn.Parameters, grads: nn.Gradient, state: AdamState,
              config: TrainConfig) -> tuple[nn.Parameters, AdamState]:
    for name, g in grads.tensors():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for (_, w), (_, g), (_, m), (_, v) in zip(params.tensors(), grads.tensors(), state.m.tensors(), state.v.tensors()):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_p.append((w - config.eta * m_hat / (np.sqrt(v_hat) + config.eps)).astype(w.dtype))
        new_m.append(m)
        new_v.append(v)

    def regroup(ts):
        return nn.Parameters(ts[0::2], ts[1::2])

    return regroup(new_p), AdamState(regroup(new_m), regroup(new_v), t)


def minibatch_gradient(spec: nn.NetworkSpec, params: nn.Parameters, X, y, masks=None,
                       loss_kind: str = "mse") -> nn.Gradient:
    """Mean of the per-sample gradients; ``masks`` has one row per sample."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ShapeError("a mini-batch needs at least one sample")
    return nn.backward(spec, params, X, y, masks, loss_kind=loss_kind)


def _inference_mse(spec, params, X, y) -> float:
    acts, _ = nn._forward_train(spec, params, np.asarray(X, dtype=params.dtype), None)
    return nn.loss("mse", acts[-1].reshape(-1), np.asarray(y).reshape(-1))


def train(dataset, spec: nn.NetworkSpec, config: TrainConfig | None = None,
          validation=None) -> tuple[nn.Parameters, TrainingLog]:
    """Train from scratch; the returned parameters need no dropout rescaling."""
    config = config or TrainConfig()
    X = np.asarray(dataset.X, dtype=config.dtype)
    y = np.asarray(dataset.y, dtype=config.dtype).reshape(X.shape[0], -1)
    if X.shape[1] != spec.layer_sizes[0]:
        raise ShapeError(f"dataset has {X.shape[1]} features, network expects {spec.layer_sizes[0]}")
    if y.shape[1] != spec.layer_sizes[-1]:
        raise ShapeError("target width does not match the output layer")

    root = Rng(config.seed)
    params = nn.init_params(spec, config.init_scheme, root.derive(_INIT_STREAM), dtype=config.dtype)
    shuffle_rng = root.derive(_SHUFFLE_STREAM)
    drop_rng = root.derive(_DROPOUT_STREAM)
    state = AdamState.zeros_like(params)
    log = TrainingLog(seed=config.seed, config=config.echo())

    n = X.shape[0]
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            masks = None
            if config.dropout and spec.n_layers > 1:
                masks = sample_masks(spec, config.keep_prob, drop_rng, len(idx), dtype=config.dtype)
            grads = minibatch_gradient(spec, params, X[idx], y[idx], masks)
            try:
                params, state = adam_step(params, grads, state, config)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
        tr = _inference_mse(spec, params, X, y)
        if not math.isfinite(tr):
            raise TrainingError(f"epoch {epoch}, batch {b}: training loss is {tr}")
        log.train_loss.append(tr)
        log.val_loss.append(None if validation is None else _inference_mse(spec, params, validation.X, validation.y))
    log.wall_time = time.perf_counter() - start
    return params, log
