"""Layer-stack network with softmax head, loss and gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Dense, layer_from_spec

PROB_FLOOR = 1e-12

# RNG stream identifiers; each stream is seeded with ``seed ^ stream_id``.
STREAM_INIT = 0x1
STREAM_SHUFFLE = 0x2
STREAM_DROPOUT = 0x3


def stream_rng(seed, stream_id):
    return np.random.default_rng(int(seed) ^ int(stream_id))


class ShapeError(ValueError):
    """Input does not match the network's expected input shape."""


@dataclass
class NetworkConfig:
    """Architecture description.

    ``layers`` lists the hidden layers only; every network ends with a dense
    layer of ``n_classes`` units followed by a softmax.
    """

    input_shape: tuple
    layers: list = field(default_factory=list)
    n_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if not self.input_shape or any(d <= 0 for d in self.input_shape):
            raise ValueError(f"input shape must have positive dimensions, got {self.input_shape}")
        if int(self.n_classes) < 1:
            raise ValueError("n_classes must be >= 1")
        self.n_classes = int(self.n_classes)
        self.layers = [dict(s) for s in self.layers]

    def with_classes(self, n_classes, seed=None):
        return NetworkConfig(self.input_shape, self.layers, n_classes, self.seed if seed is None else seed)

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [dict(s) for s in self.layers],
            "n_classes": self.n_classes,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), list(d.get("layers", [])), d["n_classes"], d.get("seed", 0))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return np.maximum(p, PROB_FLOOR)


class Network:
    """Feed-forward classifier ``x -> softmax(f(x))``.

    Inputs are batch-first arrays of shape ``(n, *input_shape)``; single
    samples of shape ``input_shape`` are accepted and promoted.
    """

    def __init__(self, config, build=True):
        self.config = config
        self.layers = [layer_from_spec(s) for s in config.layers] + [Dense(config.n_classes)]
        if build:
            rng = stream_rng(config.seed, STREAM_INIT)
            shape = config.input_shape
            for layer in self.layers:
                shape = layer.build(shape, rng)

    @property
    def n_classes(self):
        return self.config.n_classes

    @property
    def input_shape(self):
        return self.config.input_shape

    def copy(self):
        new = object.__new__(Network)
        new.config = self.config
        new.layers = [layer.copy() for layer in self.layers]
        return new

    def parameters(self):
        """List of ``(layer_index, name, array)`` for every parameter array."""
        return [(i, name, arr) for i, layer in enumerate(self.layers) for name, arr in layer.params.items()]

    def n_parameters(self):
        return sum(arr.size for _, _, arr in self.parameters())

    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            return x[None], True
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected input shape {self.input_shape} (or a batch of it), got {x.shape}")
        return x, False

    def _forward(self, x, train=False, rng=None):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, train=train, rng=rng)
            caches.append(cache)
        return x, caches

    def _backward(self, dlogits, caches):
        grads = [None] * len(self.layers)
        d = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            d, grads[i] = self.layers[i].backward(d, caches[i])
        return d, grads

    def logits(self, x):
        xb, single = self._batch(x)
        out, _ = self._forward(xb)
        return out[0] if single else out

    def forward(self, x, train_mode=False, rng=None):
        """Class probabilities. ``train_mode`` enables dropout (needs ``rng``)."""
        xb, single = self._batch(x)
        if train_mode and rng is None:
            rng = stream_rng(self.config.seed, STREAM_DROPOUT)
        out, _ = self._forward(xb, train=train_mode, rng=rng)
        p = softmax(out)
        return p[0] if single else p

    predict_proba = forward

    def predict(self, x):
        return np.argmax(self.forward(x), axis=-1)

    def _check_labels(self, y, n):
        y = np.atleast_1d(np.asarray(y))
        if y.shape != (n,):
            raise ShapeError(f"expected {n} labels, got shape {y.shape}")
        if np.any(y < 0) or np.any(y >= self.n_classes) or not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError(f"labels must be integers in [0, {self.n_classes})")
        return y.astype(np.intp)

    def loss(self, x, y):
        """Mean cross-entropy ``-log h_y(x)`` over the batch (scalar for one sample)."""
        xb, _ = self._batch(x)
        y = self._check_labels(y, len(xb))
        p = self.forward(xb)
        return float(np.mean(-np.log(p[np.arange(len(y)), y])))

    def _loss_backward(self, xb, y, train=False, rng=None):
        out, caches = self._forward(xb, train=train, rng=rng)
        p = softmax(out)
        n = len(y)
        loss = float(np.mean(-np.log(p[np.arange(n), y])))
        dlogits = p.copy()
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        dx, grads = self._backward(dlogits, caches)
        return loss, dx, grads, p

    def param_gradients(self, x, y, train_mode=False, rng=None):
        """Gradient of the mean batch loss; a list of per-layer ``{name: array}`` dicts."""
        xb, _ = self._batch(x)
        if len(xb) == 0:
            raise ValueError("empty batch")
        y = self._check_labels(y, len(xb))
        _, _, grads, _ = self._loss_backward(xb, y, train=train_mode, rng=rng)
        return grads

    def input_gradient(self, x, y):
        """``d loss / d x`` with dropout disabled; same shape as ``x``.

        For a batch, row ``i`` is the gradient of sample ``i``'s own loss.
        """
        xb, single = self._batch(x)
        y = self._check_labels(y, len(xb))
        _, dx, _, _ = self._loss_backward(xb, y)
        dx = dx * len(xb)
        return dx[0] if single else dx

    def logit_jacobian(self, x):
        """Logits and their input Jacobian.

        For one sample returns ``(K,)`` and ``(K, *input_shape)``; for a batch
        ``(n, K)`` and ``(n, K, *input_shape)``.
        """
        xb, single = self._batch(x)
        out, caches = self._forward(xb)
        k = self.n_classes
        rows = []
        for c in range(k):
            d = np.zeros((len(xb), k))
            d[:, c] = 1.0
            dx, _ = self._backward(d, caches)
            rows.append(dx)
        jac = np.stack(rows, axis=1)
        return (out[0], jac[0]) if single else (out, jac)
