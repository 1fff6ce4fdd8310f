"""Minibatch SGD with momentum and stepped learning-rate decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .network import STREAM_DROPOUT, STREAM_SHUFFLE, stream_rng

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    decay_epochs: list = field(default_factory=lambda: [50, 100])
    decay_factor: float = 10.0
    seed: int = 0

    def __post_init__(self):
        self.decay_epochs = [int(e) for e in self.decay_epochs]
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError(f"decay epochs must be strictly increasing, got {self.decay_epochs}")
        if self.decay_epochs and self.decay_epochs[-1] >= self.epochs:
            raise ValueError(f"decay epochs must be < epochs ({self.epochs}), got {self.decay_epochs}")
        if self.decay_factor <= 0:
            raise ValueError("decay_factor must be positive")

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "decay_epochs": list(self.decay_epochs),
            "decay_factor": self.decay_factor,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def learning_rate(cfg, epoch):
    """Rate in effect during ``epoch`` (0-based)."""
    n_decays = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.learning_rate / cfg.decay_factor ** n_decays


def evaluate_accuracy(net, X, y):
    """Fraction of samples whose argmax prediction equals the label."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty dataset")
    pred = np.argmax(net.forward(X), axis=-1)
    return float(np.mean(pred == y))


def train(net, X, y, cfg, log_every=0):
    """Train ``net`` in place and return ``(net, history)``.

    ``history`` holds one dict per epoch with the mean minibatch loss and the
    training accuracy measured in inference mode after the epoch. Entry 0 is
    the untrained state.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n = len(X)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if np.any(y < 0) or np.any(y >= net.n_classes):
        raise ValueError(f"labels must lie in [0, {net.n_classes})")
    y = y.astype(np.intp)

    shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE)
    dropout_rng = stream_rng(cfg.seed, STREAM_DROPOUT)
    velocity = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in net.layers]

    history = [{"epoch": 0, "loss": net.loss(X, y), "accuracy": evaluate_accuracy(net, X, y), "lr": None}]
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_loss, _, grads, _ = net._loss_backward(X[idx], y[idx], train=True, rng=dropout_rng)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}, batch starting {start} (lr={lr:g})"
                )
            total += batch_loss * len(idx)
            for layer, g, v in zip(net.layers, grads, velocity):
                for name, arr in layer.params.items():
                    v[name] *= cfg.momentum
                    v[name] -= lr * g[name]
                    arr += v[name]
        for _, _, arr in net.parameters():
            if not np.all(np.isfinite(arr)):
                raise TrainingDivergedError(f"non-finite parameters after epoch {epoch + 1} (lr={lr:g})")
        record = {"epoch": epoch + 1, "loss": total / n, "accuracy": evaluate_accuracy(net, X, y), "lr": lr}
        history.append(record)
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d loss %.4f acc %.4f lr %g", epoch + 1, record["loss"], record["accuracy"], lr)
    return net, history
