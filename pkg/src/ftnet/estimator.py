"""scikit-learn style wrapper around the trainer and the masked forward pass."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .trainer import TrainConfig, train


class FaultTolerantMLPRegressor(RegressorMixin, BaseEstimator):
    """MLP regressor trained with Adam and inverted dropout.

    ``predict`` accepts a ``failure_set`` of ``(layer, neuron)`` pairs whose
    activations are forced to zero, which is how a lost node behaves.

    >>> from ftnet.data import generate, DataGenConfig
    >>> train_set, _ = generate(DataGenConfig(n_train=200, n_test=1))
    >>> est = FaultTolerantMLPRegressor(epochs=2).fit(train_set.X, train_set.y)
    >>> est.predict(train_set.X[:2], failure_set=[(1, 3)]).shape
    (2,)
    """

    def __init__(self, hidden_layer_sizes=(10, 10), hidden_activation="relu", eta=0.001, beta1=0.9,
                 beta2=0.999, eps=1e-8, batch_size=64, epochs=200, drop_prob=0.5, dropout=True,
                 init_scheme="he", random_state=0, precision="float64"):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.hidden_activation = hidden_activation
        self.eta = eta
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.batch_size = batch_size
        self.epochs = epochs
        self.drop_prob = drop_prob
        self.dropout = dropout
        self.init_scheme = init_scheme
        self.random_state = random_state
        self.precision = precision

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.eta, self.beta1, self.beta2, self.eps, self.batch_size, self.epochs,
                           self.drop_prob, self.dropout, self.init_scheme, int(self.random_state or 0),
                           self.precision)

    def fit(self, X, y, validation=None):
        from .data import Dataset

        X, y = check_X_y(X, y, y_numeric=True, dtype=np.float64)
        self.spec_ = nn.NetworkSpec((X.shape[1], *self.hidden_layer_sizes, 1), self.hidden_activation)
        self.params_, self.log_ = train(Dataset(X, y, "train"), self.spec_, self._train_config(), validation)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, failure_set=None):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fitted with {self.n_features_in_}")
        return nn.forward(self.spec_, self.params_, X.astype(self.params_.dtype), failure_set).output[:, 0]

    def degradation(self, X, y, k_values=range(8), trials=100, random_state=None, n_permutations=10_000):
        """Degradation rows over ``k`` random hidden failures, scored on ``(X, y)``."""
        from .data import Dataset
        from .faults import degradation_sweep

        check_is_fitted(self, "params_")
        X, y = check_X_y(X, y, y_numeric=True, dtype=np.float64)
        seed = self.random_state if random_state is None else random_state
        return degradation_sweep(self.spec_, self.params_, Dataset(X, y, "test"), list(k_values), trials,
                                 seed, n_permutations=n_permutations)
