"""Synthetic regression data and its CSV format."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DataFormatError
from .rng import Rng

TARGET_VERSION = "g1"
_TRAIN_STREAM = 1
_TEST_STREAM = 2


@dataclass
class DataGenConfig:
    seed: int = 0
    n_train: int = 5000
    n_test: int = 1000
    feature_dim: int = 10
    noise_sigma: float = 0.1

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("dataset sizes must be at least 1")
        if self.feature_dim < 10:
            raise ConfigError("the target function reads 10 features; feature_dim must be >= 10")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise DataFormatError(f"X {self.X.shape} and y {self.y.shape} do not form a dataset")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise DataFormatError("dataset contains non-finite values")

    def __len__(self):
        return self.X.shape[0]

    def equal(self, other: "Dataset") -> bool:
        return (
            self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )


def target_function(X: np.ndarray) -> np.ndarray:
    """The frozen nonlinear regression target over the first 10 features."""
    x = [X[:, i] for i in range(10)]
    return (
        np.sin(math.pi * x[0])
        + x[1] * x[2]
        + 0.5 * x[3] ** 2
        - x[4]
        + 0.2 * np.tanh(3.0 * x[5])
        + 0.1 * x[6] * x[7]
        - 0.15 * x[8] * x[9]
    )


def _draw(rng: Rng, n: int, d: int, sigma: float, split: str) -> Dataset:
    X = rng.uniform(-1.0, 1.0, (n, d))
    y = target_function(X)
    if sigma > 0:
        y = y + sigma * rng.normal(n)
    return Dataset(X, y, split)


def generate(config: DataGenConfig | None = None) -> tuple[Dataset, Dataset]:
    config = config or DataGenConfig()
    root = Rng(config.seed)
    train = _draw(root.derive(_TRAIN_STREAM), config.n_train, config.feature_dim, config.noise_sigma, "train")
    test = _draw(root.derive(_TEST_STREAM), config.n_test, config.feature_dim, config.noise_sigma, "test")
    return train, test


def header(d: int) -> str:
    return ",".join([f"x{i}" for i in range(1, d + 1)] + ["y"])


def write_csv(dataset: Dataset, path) -> None:
    d = dataset.X.shape[1]
    lines = [header(d)]
    for row, target in zip(dataset.X.tolist(), dataset.y.tolist()):
        lines.append(",".join(repr(v) for v in row) + "," + repr(target))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path, split: str | None = None) -> Dataset:
    path = Path(path)
    text = path.read_text().splitlines()
    if not text:
        raise DataFormatError("empty file", line=1)
    cols = text[0].split(",")
    d = len(cols) - 1
    if d < 1 or cols != header(d).split(","):
        raise DataFormatError(f"unexpected header {text[0]!r}", line=1)
    rows = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != d + 1:
            raise DataFormatError(f"expected {d + 1} fields, found {len(fields)}", line=lineno)
        try:
            vals = [float(f) for f in fields]
        except ValueError as exc:
            raise DataFormatError(f"unparseable number ({exc})", line=lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise DataFormatError("non-finite value", line=lineno)
        rows.append(vals)
    if not rows:
        raise DataFormatError("no data rows", line=2)
    arr = np.array(rows, dtype=np.float64)
    return Dataset(arr[:, :d], arr[:, d], split or path.stem)


def write_metadata(config: DataGenConfig, path) -> None:
    lines = [
        f"seed={config.seed}",
        f"n_train={config.n_train}",
        f"n_test={config.n_test}",
        f"feature_dim={config.feature_dim}",
        f"noise_sigma={config.noise_sigma!r}",
        f"target={TARGET_VERSION}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def write_split(train: Dataset, test: Dataset, config: DataGenConfig, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"train": out / "train.csv", "test": out / "test.csv", "meta": out / "dataset.meta"}
    write_csv(train, paths["train"])
    write_csv(test, paths["test"])
    write_metadata(config, paths["meta"])
    return paths
