"""scikit-learn facade over :class:`Network`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .._validation import check_images, check_labels
from .network import Network, NetworkConfig
from .training import TrainConfig, train


class NeuralNetClassifier(ClassifierMixin, BaseEstimator):
    """Softmax network trained with momentum SGD.

    Parameters
    ----------
    layers : list of dict, default=None
        Hidden layer descriptions (see ``nn.layers``). ``None`` gives a plain
        linear-softmax model.
    n_classes : int, default=None
        Number of classes ``K``; inferred as ``max(y) + 1`` when ``None``.
    epochs, batch_size, learning_rate, momentum, decay_epochs, decay_factor
        Optimisation schedule, see :class:`TrainConfig`.
    random_state : int, default=0
        Seeds weight init, shuffling and dropout (independent streams).
    """

    def __init__(
        self,
        layers=None,
        n_classes=None,
        epochs=40,
        batch_size=32,
        learning_rate=0.05,
        momentum=0.9,
        decay_epochs=(25, 35),
        decay_factor=10.0,
        random_state=0,
    ):
        self.layers = layers
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.decay_epochs = decay_epochs
        self.decay_factor = decay_factor
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.momentum,
            list(self.decay_epochs),
            self.decay_factor,
            self.random_state,
        )

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X), self.n_classes)
        k = int(self.n_classes) if self.n_classes is not None else int(y.max()) + 1
        config = NetworkConfig(X.shape[1:], list(self.layers or []), k, self.random_state)
        if k == 1:
            # a one-class softmax is constant; nothing to learn
            self.network_, self.history_ = Network(config), []
        else:
            self.network_, self.history_ = train(Network(config), X, y, self._train_config())
        self._set_fitted(k)
        return self

    def _set_fitted(self, k):
        self.classes_ = np.arange(k)
        self.n_classes_ = k
        self.input_shape_ = self.network_.input_shape

    @classmethod
    def from_network(cls, network, history=None):
        """Wrap an already trained network (e.g. one loaded from disk)."""
        cfg = network.config
        est = cls(layers=cfg.layers, n_classes=cfg.n_classes, random_state=cfg.seed)
        est.network_ = network
        est.history_ = history or []
        est._set_fitted(cfg.n_classes)
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        return self.network_.forward(check_images(X, self.input_shape_))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)
