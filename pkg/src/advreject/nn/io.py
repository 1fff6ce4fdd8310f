"""Versioned JSON persistence for networks."""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .network import Network, NetworkConfig

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def network_to_dict(net):
    layers = []
    for layer in net.layers:
        entry = layer.spec()
        if "W" in layer.params:
            entry["shape"] = list(layer.params["W"].shape)
            entry["weights"] = layer.params["W"].ravel().tolist()
            entry["bias"] = layer.params["b"].tolist()
        layers.append(entry)
    layers.append({"kind": "softmax", "units": net.n_classes})
    return {"format_version": FORMAT_VERSION, "config": net.config.to_dict(), "layers": layers}


def network_from_dict(doc):
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format_version {version!r} (expected {FORMAT_VERSION})")
    config = NetworkConfig.from_dict(doc["config"])
    net = Network(config)
    entries = doc["layers"]
    if len(entries) != len(net.layers) + 1:
        raise ModelFormatError(f"expected {len(net.layers) + 1} layer entries, found {len(entries)}")
    if entries[-1].get("kind") != "softmax" or entries[-1].get("units", config.n_classes) != config.n_classes:
        raise ModelFormatError(f"final layer must be a softmax over {config.n_classes} classes")
    for i, (layer, entry) in enumerate(zip(net.layers, entries)):
        if entry.get("kind") != layer.kind:
            raise ModelFormatError(f"layer {i}: kind {entry.get('kind')!r} does not match config ({layer.kind!r})")
        if not layer.params:
            continue
        shape = tuple(entry.get("shape", ()))
        expected = layer.params["W"].shape
        if shape != expected:
            raise ModelFormatError(f"layer {i}: weight shape {list(shape)} does not match {list(expected)}")
        w = np.asarray(entry["weights"], dtype=np.float64)
        b = np.asarray(entry["bias"], dtype=np.float64)
        if w.size != int(np.prod(expected)) or b.shape != layer.params["b"].shape:
            raise ModelFormatError(f"layer {i}: parameter payload has the wrong length")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ModelFormatError(f"layer {i}: non-finite parameters")
        layer.params["W"] = w.reshape(expected)
        layer.params["b"] = b
    return net


def save_network(net, path):
    with open(path, "w") as f:
        json.dump(network_to_dict(net), f)


def load_network(path):
    with open(path) as f:
        return network_from_dict(json.load(f))


def model_hash(net):
    """SHA-256 of the canonical JSON serialisation."""
    blob = json.dumps(network_to_dict(net), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
