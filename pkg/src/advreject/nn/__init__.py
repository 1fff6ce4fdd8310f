from .estimator import NeuralNetClassifier
from .io import ModelFormatError, load_network, model_hash, network_from_dict, network_to_dict, save_network
from .layers import Conv2D, Dense, Dropout, MaxPool2x2, ReLU, ResponseNorm, layer_from_spec
from .network import Network, NetworkConfig, ShapeError, softmax, stream_rng
from .presets import network_preset, train_preset
from .training import TrainConfig, TrainingDivergedError, evaluate_accuracy, learning_rate, train

__all__ = [
    "Conv2D",
    "Dense",
    "Dropout",
    "MaxPool2x2",
    "ModelFormatError",
    "Network",
    "NetworkConfig",
    "NeuralNetClassifier",
    "ReLU",
    "ResponseNorm",
    "ShapeError",
    "TrainConfig",
    "TrainingDivergedError",
    "evaluate_accuracy",
    "layer_from_spec",
    "learning_rate",
    "load_network",
    "model_hash",
    "network_from_dict",
    "network_preset",
    "network_to_dict",
    "save_network",
    "softmax",
    "stream_rng",
    "train",
    "train_preset",
]
