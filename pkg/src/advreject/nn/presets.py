"""Named architecture and schedule presets."""

from __future__ import annotations

from .network import NetworkConfig
from .training import TrainConfig


def _conv_block(filters, size, norm):
    block = [{"kind": "conv2d", "filters": filters, "size": size}, {"kind": "relu"}]
    if norm:
        block.append({"kind": "response-norm", "size": 5, "k": 1.0, "alpha": 1e-4, "beta": 0.75})
    block.append({"kind": "maxpool2x2"})
    return block


def conv_stack_layers(filters=(32, 32, 64), size=5, norm=True, dropout=0.5):
    layers = []
    for f in filters:
        layers += _conv_block(f, size, norm)
    layers.append({"kind": "dropout", "p": dropout})
    return layers


def network_preset(name, input_shape=None, n_classes=10, seed=0):
    """Return a :class:`NetworkConfig` for ``mnist-full``, ``cifar-full``, ``desk`` or ``mlp``."""
    if name == "mnist-full":
        return NetworkConfig(input_shape or (1, 28, 28), conv_stack_layers(), n_classes, seed)
    if name == "cifar-full":
        return NetworkConfig(input_shape or (3, 32, 32), conv_stack_layers(), n_classes, seed)
    if name == "desk":
        # response-norm replaced by identity at desk scale
        return NetworkConfig(input_shape or (1, 14, 14), conv_stack_layers((8, 8, 16), 3, norm=False), n_classes, seed)
    if name == "mlp":
        if input_shape is None:
            raise ValueError("the mlp preset needs an explicit input shape")
        layers = [{"kind": "dense", "units": 32}, {"kind": "relu"}, {"kind": "dropout", "p": 0.5}]
        return NetworkConfig(input_shape, layers, n_classes, seed)
    raise ValueError(f"unknown network preset {name!r}")


def train_preset(name, seed=0):
    if name == "mnist-full":
        return TrainConfig(150, 128, 0.1, 0.9, [50, 100], 10.0, seed)
    if name == "cifar-full":
        return TrainConfig(150, 128, 0.01, 0.9, [120, 130], 10.0, seed)
    if name == "desk":
        return TrainConfig(30, 32, 0.05, 0.9, [20, 25], 10.0, seed)
    if name == "mlp":
        return TrainConfig(40, 32, 0.05, 0.9, [25, 35], 10.0, seed)
    raise ValueError(f"unknown training preset {name!r}")
