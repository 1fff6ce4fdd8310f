"""Experiment configuration: strict JSON schema and named presets.

Schema (every key optional unless noted; unknown keys are rejected)::

    {
      "name": str,
      "dataset": {"source": "synthetic" | "digits" | "idx", ...source options},
      "network": {"preset": "mlp" | "desk" | "mnist-full" | "cifar-full",
                  "layers": [...]},           # layers overrides the preset
      "train": {"epochs", "batch_size", "learning_rate", "momentum",
                "decay_epochs", "decay_factor"},
      "attack": {AttackConfig fields},
      "ensemble": {"coverage": 0.8, "per_class_count": 500},
      "taus": {"step": 0.05} | {"values": [...]},
      "seeds": {"ga", "naive", "pure": [...], "specialist_base", "data"}
    }

Dataset options: ``synthetic`` takes the SyntheticSpec fields; ``digits``
(scikit-learn's bundled 8x8 handwritten digits) takes ``train_size``;
``idx`` takes ``train_images``, ``train_labels``, ``test_images``,
``test_labels`` (required, must exist), ``downsample`` (1 or 2),
``train_subset`` and ``test_subset``.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .attacks import AttackConfig
from .data import SyntheticSpec
from .nn import TrainConfig, network_preset, train_preset


class ConfigError(ValueError):
    pass


TOP_KEYS = {"name", "dataset", "network", "train", "attack", "ensemble", "taus", "seeds"}
DATASET_KEYS = {
    "synthetic": {"source", "n_classes", "samples_per_class", "dim", "separation", "noise", "seed"},
    "digits": {"source", "train_size", "seed"},
    "idx": {
        "source", "train_images", "train_labels", "test_images", "test_labels",
        "downsample", "train_subset", "test_subset", "n_classes", "seed",
    },
}
NETWORK_KEYS = {"preset", "layers"}
TRAIN_KEYS = {"epochs", "batch_size", "learning_rate", "momentum", "decay_epochs", "decay_factor"}
ATTACK_KEYS = set(AttackConfig.__dataclass_fields__)
ENSEMBLE_KEYS = {"coverage", "per_class_count"}
TAU_KEYS = {"step", "values"}
SEED_KEYS = {"ga", "naive", "pure", "specialist_base", "data"}

DIGITS_LAYERS = [{"kind": "dense", "units": 64}, {"kind": "relu"}, {"kind": "dropout", "p": 0.5}]
FINE_EPSILON_GRID = [round(0.005 * 2 ** (j / 2), 6) for j in range(17)]

PRESETS = {
    "digits": {
        "name": "digits",
        "dataset": {"source": "digits", "train_size": 1400, "seed": 0},
        "network": {"preset": "mlp", "layers": DIGITS_LAYERS},
        "train": {"epochs": 30, "batch_size": 32, "learning_rate": 0.05, "momentum": 0.9,
                  "decay_epochs": [18, 25], "decay_factor": 10.0},
        "attack": {"target_fool_rate": 0.99, "epsilon_grid": FINE_EPSILON_GRID},
        "ensemble": {"coverage": 0.8, "per_class_count": 100},
        "taus": {"step": 0.05},
        "seeds": {"ga": 1, "naive": 2, "pure": [10, 11, 12, 13, 14], "specialist_base": 100, "data": 0},
    },
    "synthetic": {
        "name": "synthetic",
        "dataset": {"source": "synthetic", "n_classes": 4, "samples_per_class": 250, "dim": 196,
                    "separation": 1.5, "noise": 0.25, "seed": 0},
        "network": {"preset": "mlp", "layers": [{"kind": "dense", "units": 32}, {"kind": "relu"},
                                                {"kind": "dropout", "p": 0.5}]},
        "train": {"epochs": 40, "batch_size": 32, "learning_rate": 0.05, "momentum": 0.9,
                  "decay_epochs": [25, 35], "decay_factor": 10.0},
        "attack": {"target_fool_rate": 0.99, "epsilon_grid": FINE_EPSILON_GRID},
        "ensemble": {"coverage": 0.8, "per_class_count": 150},
        "taus": {"step": 0.05},
        "seeds": {"ga": 1, "naive": 2, "pure": [10, 11, 12, 13, 14], "specialist_base": 100, "data": 0},
    },
    "mnist-desk": {
        "name": "mnist-desk",
        "dataset": {"source": "idx", "train_images": "data/train-images-idx3-ubyte",
                    "train_labels": "data/train-labels-idx1-ubyte",
                    "test_images": "data/t10k-images-idx3-ubyte", "test_labels": "data/t10k-labels-idx1-ubyte",
                    "downsample": 2, "train_subset": 2000, "test_subset": 500},
        "network": {"preset": "desk"},
        "train": {"epochs": 30, "batch_size": 32, "learning_rate": 0.05, "momentum": 0.9,
                  "decay_epochs": [20, 25], "decay_factor": 10.0},
        "attack": {"target_fool_rate": 0.99, "epsilon_grid": FINE_EPSILON_GRID},
        "ensemble": {"coverage": 0.8, "per_class_count": 100},
        "taus": {"step": 0.05},
        "seeds": {"ga": 1, "naive": 2, "pure": [10, 11, 12, 13, 14], "specialist_base": 100, "data": 0},
    },
    "mnist-full": {
        "name": "mnist-full",
        "dataset": {"source": "idx", "train_images": "data/train-images-idx3-ubyte",
                    "train_labels": "data/train-labels-idx1-ubyte",
                    "test_images": "data/t10k-images-idx3-ubyte", "test_labels": "data/t10k-labels-idx1-ubyte",
                    "downsample": 1},
        "network": {"preset": "mnist-full"},
        "train": {"epochs": 150, "batch_size": 128, "learning_rate": 0.1, "momentum": 0.9,
                  "decay_epochs": [50, 100], "decay_factor": 10.0},
        "attack": {"target_fool_rate": 1.0},
        "ensemble": {"coverage": 0.8, "per_class_count": 500},
        "taus": {"step": 0.05},
        "seeds": {"ga": 1, "naive": 2, "pure": [10, 11, 12, 13, 14], "specialist_base": 100, "data": 0},
    },
}


def _check_keys(section, allowed, where):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def validate(cfg, base_dir=None, check_paths=True):
    """Check a raw config dict; returns a deep copy with defaults filled in."""
    cfg = copy.deepcopy(cfg)
    _check_keys(cfg, TOP_KEYS, "config")
    if "dataset" not in cfg:
        raise ConfigError("config needs a 'dataset' section")
    ds = cfg["dataset"]
    source = ds.get("source") if isinstance(ds, dict) else None
    if source not in DATASET_KEYS:
        raise ConfigError(f"dataset.source must be one of {sorted(DATASET_KEYS)}, got {source!r}")
    _check_keys(ds, DATASET_KEYS[source], f"dataset ({source})")
    if source == "synthetic":
        SyntheticSpec(**{k: v for k, v in ds.items() if k != "source"})
    if source == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key not in ds:
                raise ConfigError(f"dataset.{key} is required for idx input")
            if check_paths:
                path = Path(ds[key])
                if base_dir is not None and not path.is_absolute():
                    path = Path(base_dir) / path
                if not path.exists():
                    raise ConfigError(f"dataset.{key}: {path} does not exist")
                ds[key] = str(path)
        if ds.get("downsample", 1) not in (1, 2):
            raise ConfigError("dataset.downsample must be 1 or 2")

    net = cfg.setdefault("network", {"preset": "mlp"})
    _check_keys(net, NETWORK_KEYS, "network")
    net.setdefault("preset", "mlp")
    if net["preset"] not in ("mlp", "desk", "mnist-full", "cifar-full"):
        raise ConfigError(f"unknown network preset {net['preset']!r}")

    train = cfg.setdefault("train", {})
    _check_keys(train, TRAIN_KEYS, "train")
    preset_train = train_preset(net["preset"]).to_dict()
    preset_train.pop("seed")
    cfg["train"] = {**preset_train, **train}
    TrainConfig(**cfg["train"])

    attack = cfg.setdefault("attack", {})
    _check_keys(attack, ATTACK_KEYS, "attack")
    AttackConfig.from_dict(attack)

    ens = cfg.setdefault("ensemble", {})
    _check_keys(ens, ENSEMBLE_KEYS, "ensemble")
    ens.setdefault("coverage", 0.8)
    ens.setdefault("per_class_count", 500)
    if not 0 < ens["coverage"] <= 1:
        raise ConfigError("ensemble.coverage must lie in (0, 1]")

    taus = cfg.setdefault("taus", {"step": 0.05})
    _check_keys(taus, TAU_KEYS, "taus")
    if "values" in taus:
        vals = taus["values"]
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConfigError("taus.values must be strictly increasing")

    seeds = cfg.setdefault("seeds", {})
    _check_keys(seeds, SEED_KEYS, "seeds")
    seeds.setdefault("ga", 1)
    seeds.setdefault("naive", 2)
    seeds.setdefault("pure", [10, 11, 12, 13, 14])
    seeds.setdefault("specialist_base", 100)
    seeds.setdefault("data", 0)
    if seeds["naive"] == seeds["ga"]:
        raise ConfigError("seeds.naive must differ from seeds.ga")
    if len(set(seeds["pure"])) != len(seeds["pure"]):
        raise ConfigError("seeds.pure must be pairwise distinct")
    cfg.setdefault("name", source)
    return cfg


def load_config(path, check_paths=True):
    path = Path(path)
    with open(path) as f:
        raw = json.load(f)
    return validate(raw, base_dir=path.parent, check_paths=check_paths)


def preset_config(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return validate(PRESETS[name], check_paths=False)


def network_config(cfg, input_shape, n_classes, seed):
    net = network_preset(cfg["network"]["preset"], tuple(input_shape), n_classes, seed)
    if "layers" in cfg["network"]:
        net.layers = [dict(layer) for layer in cfg["network"]["layers"]]
    return net
