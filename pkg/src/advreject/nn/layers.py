"""Layer primitives operating on batch-first float64 arrays.

Every layer is split into a stateless ``forward`` returning ``(out, cache)``
and a ``backward`` consuming that cache, so a built network can be shared
between threads for inference while training mutates a private copy.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2x2", "response-norm", "dropout", "softmax")


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base class. Parametric layers keep their arrays in ``self.params``."""

    kind = None

    def __init__(self):
        self.params = {}
        self.input_shape = None
        self.output_shape = None

    def build(self, input_shape, rng):
        self.input_shape = tuple(input_shape)
        self.output_shape = self._output_shape(self.input_shape)
        return self.output_shape

    def _output_shape(self, input_shape):
        return input_shape

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError

    def spec(self):
        return {"kind": self.kind}

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new


class Dense(Layer):
    kind = "dense"

    def __init__(self, units):
        super().__init__()
        if int(units) <= 0:
            raise ValueError(f"dense units must be positive, got {units}")
        self.units = int(units)

    def _output_shape(self, input_shape):
        return (self.units,)

    def build(self, input_shape, rng):
        out = super().build(input_shape, rng)
        fan_in = int(np.prod(input_shape))
        self.params = {
            "W": glorot_uniform(rng, (fan_in, self.units), fan_in, self.units),
            "b": np.zeros(self.units),
        }
        return out

    def forward(self, x, train=False, rng=None):
        flat = x.reshape(x.shape[0], -1)
        return flat @ self.params["W"] + self.params["b"], (flat, x.shape)

    def backward(self, dout, cache):
        flat, shape = cache
        grads = {"W": flat.T @ dout, "b": dout.sum(axis=0)}
        return (dout @ self.params["W"].T).reshape(shape), grads

    def spec(self):
        return {"kind": self.kind, "units": self.units}


class Conv2D(Layer):
    """Stride-1 convolution with zero 'same' padding (odd filter sizes)."""

    kind = "conv2d"

    def __init__(self, filters, size=3):
        super().__init__()
        if int(filters) <= 0:
            raise ValueError(f"conv2d filter count must be positive, got {filters}")
        if int(size) <= 0 or int(size) % 2 == 0:
            raise ValueError(f"conv2d filter size must be a positive odd integer, got {size}")
        self.filters = int(filters)
        self.size = int(size)

    def _output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ValueError(f"conv2d expects (channels, height, width) input, got {input_shape}")
        _, h, w = input_shape
        return (self.filters, h, w)

    def build(self, input_shape, rng):
        out = super().build(input_shape, rng)
        c = input_shape[0]
        k = self.size
        self.params = {
            "W": glorot_uniform(rng, (self.filters, c, k, k), c * k * k, self.filters * k * k),
            "b": np.zeros(self.filters),
        }
        return out

    def _cols(self, x):
        p = self.size // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        # (N, C, H, W, k, k) -> (N, H, W, C, k, k)
        win = sliding_window_view(xp, (self.size, self.size), axis=(2, 3))
        n, c, h, w = x.shape
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * self.size * self.size)

    def forward(self, x, train=False, rng=None):
        n, _, h, w = x.shape
        cols = self._cols(x)
        wmat = self.params["W"].reshape(self.filters, -1)
        out = cols @ wmat.T + self.params["b"]
        return out.reshape(n, h, w, self.filters).transpose(0, 3, 1, 2), (cols, x.shape)

    def backward(self, dout, cache):
        cols, shape = cache
        n, c, h, w = shape
        k = self.size
        p = k // 2
        d = dout.transpose(0, 2, 3, 1).reshape(n * h * w, self.filters)
        grads = {
            "W": (d.T @ cols).reshape(self.params["W"].shape),
            "b": d.sum(axis=0),
        }
        dcols = (d @ self.params["W"].reshape(self.filters, -1)).reshape(n, h, w, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w], grads

    def spec(self):
        return {"kind": self.kind, "filters": self.filters, "size": self.size}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, cache):
        return dout * cache, {}


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2. Odd trailing rows/columns are dropped."""

    kind = "maxpool2x2"

    def _output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ValueError(f"maxpool2x2 expects (channels, height, width) input, got {input_shape}")
        c, h, w = input_shape
        if h < 2 or w < 2:
            raise ValueError(f"maxpool2x2 input too small: {input_shape}")
        return (c, h // 2, w // 2)

    def forward(self, x, train=False, rng=None):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        blocks = (
            x[:, :, :2 * h2, :2 * w2]
            .reshape(n, c, h2, 2, w2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h2, w2, 4)
        )
        # ties route to the first maximal position
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, dout, cache):
        idx, shape = cache
        n, c, h, w = shape
        h2, w2 = h // 2, w // 2
        blocks = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
        dx = np.zeros(shape)
        dx[:, :, :2 * h2, :2 * w2] = (
            blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        )
        return dx, {}


class ResponseNorm(Layer):
    """Cross-channel response normalization.

    ``b_c = a_c / (k + alpha * sum_{c' in window(c)} a_{c'}^2) ** beta`` with a
    window of ``size`` channels centred on ``c`` (truncated at the edges).
    Used as the stand-in for local contrast normalization.
    """

    kind = "response-norm"

    def __init__(self, size=5, k=1.0, alpha=1e-4, beta=0.75):
        super().__init__()
        self.size = int(size)
        self.k = float(k)
        self.alpha = float(alpha)
        self.beta = float(beta)

    def _window_sum(self, sq):
        # sum over channel window along axis 1
        half = self.size // 2
        c = sq.shape[1]
        csum = np.cumsum(np.pad(sq, [(0, 0), (1, 0)] + [(0, 0)] * (sq.ndim - 2)), axis=1)
        hi = np.minimum(np.arange(c) + half + 1, c)
        lo = np.maximum(np.arange(c) - half, 0)
        return csum[:, hi] - csum[:, lo]

    def forward(self, x, train=False, rng=None):
        s = self.k + self.alpha * self._window_sum(x * x)
        scale = s ** (-self.beta)
        return x * scale, (x, s, scale)

    def backward(self, dout, cache):
        x, s, scale = cache
        t = dout * x * scale / s
        dx = dout * scale - 2.0 * self.alpha * self.beta * x * self._window_sum(t)
        return dx, {}

    def spec(self):
        return {"kind": self.kind, "size": self.size, "k": self.k, "alpha": self.alpha, "beta": self.beta}


class Dropout(Layer):
    """Inverted dropout: surviving units are scaled by 1/(1-p) at train time."""

    kind = "dropout"

    def __init__(self, p=0.5):
        super().__init__()
        p = float(p)
        if not 0.0 < p < 1.0:
            raise ValueError(f"dropout probability must lie in (0, 1), got {p}")
        self.p = p

    def forward(self, x, train=False, rng=None):
        if not train:
            return x, None
        mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * mask, mask

    def backward(self, dout, cache):
        if cache is None:
            return dout, {}
        return dout * cache, {}

    def spec(self):
        return {"kind": self.kind, "p": self.p}


_FACTORIES = {
    "dense": lambda s: Dense(s["units"]),
    "conv2d": lambda s: Conv2D(s["filters"], s.get("size", 3)),
    "relu": lambda s: ReLU(),
    "maxpool2x2": lambda s: MaxPool2x2(),
    "response-norm": lambda s: ResponseNorm(
        s.get("size", 5), s.get("k", 1.0), s.get("alpha", 1e-4), s.get("beta", 0.75)
    ),
    "dropout": lambda s: Dropout(s.get("p", 0.5)),
}


def layer_from_spec(spec):
    """Instantiate a hidden layer from its dict description."""
    kind = spec.get("kind")
    if kind not in _FACTORIES:
        raise ValueError(f"unknown or non-hidden layer kind {kind!r}; expected one of {sorted(_FACTORIES)}")
    return _FACTORIES[kind](spec)
