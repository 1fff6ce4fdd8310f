import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advreject.nn import (
    Dense,
    MaxPool2x2,
    ModelFormatError,
    Network,
    NetworkConfig,
    NeuralNetClassifier,
    ShapeError,
    TrainConfig,
    evaluate_accuracy,
    learning_rate,
    network_from_dict,
    network_to_dict,
    train,
)
from gradcheck import (
    flatten_grads,
    linear_net,
    numeric_input_gradient,
    numeric_param_gradients,
    relative_error,
    tiny_net,
)



class TestForward:
    def test_zero_weights_give_uniform(self):
        net = linear_net(np.zeros((3, 5)), np.zeros(5))
        np.testing.assert_allclose(net.forward(np.array([0.3, 0.9, 0.1])), np.full(5, 0.2))

    def test_hand_computed_dense_softmax(self):
        net = linear_net([[1.0, -1.0], [0.5, 2.0]], [0.1, -0.2])
        x = np.array([0.4, 0.7])
        z = np.array([0.4 + 0.35 + 0.1, -0.4 + 1.4 - 0.2])
        expected = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(net.forward(x), expected, rtol=1e-12)

    def test_shape_mismatch_rejected(self):
        net = linear_net(np.zeros((3, 2)), np.zeros(2))
        with pytest.raises(ShapeError):
            net.forward(np.zeros(4))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
    def test_output_on_simplex(self, seed, scale):
        net, x, _ = tiny_net(seed % 20)
        p = net.forward(x * scale)
        assert np.all(p >= 1e-12) and np.all(p <= 1)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)

    def test_dropout_only_active_in_train_mode(self):
        cfg = NetworkConfig((6,), [{"kind": "dense", "units": 20}, {"kind": "dropout", "p": 0.5}], 3, seed=1)
        net = Network(cfg)
        x = np.linspace(0, 1, 6)
        np.testing.assert_array_equal(net.forward(x), net.forward(x))
        rng = np.random.default_rng(0)
        assert not np.allclose(net.forward(x, train_mode=True, rng=rng), net.forward(x))


class TestLoss:
    def test_perfect_prediction(self):
        net = linear_net([[1000.0, -1000.0]], [0.0, 0.0])
        assert net.loss(np.array([1.0]), 0) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_ten_classes(self):
        net = linear_net(np.zeros((2, 10)), np.zeros(10))
        assert net.loss(np.array([0.5, 0.5]), 3) == pytest.approx(math.log(10))

    def test_hand_two_class_logits(self):
        net = linear_net([[0.0, 0.0]], [2.0, 0.0])
        expected = -math.log(math.exp(2) / (math.exp(2) + 1))
        assert net.loss(np.array([0.0]), 0) == pytest.approx(expected, rel=1e-12)

    def test_floor_keeps_loss_finite(self):
        net = linear_net([[1e6, -1e6]], [0.0, 0.0])
        assert net.loss(np.array([1.0]), 1) == pytest.approx(-math.log(1e-12))

    def test_label_out_of_range(self):
        net = linear_net(np.zeros((2, 3)), np.zeros(3))
        with pytest.raises(ValueError):
            net.loss(np.zeros(2), 3)


class TestGradients:
    @pytest.mark.parametrize("trial", range(10))
    def test_param_gradients_match_finite_differences(self, trial):
        net, x, y = tiny_net(trial)
        assert net.n_parameters() <= 500
        analytic = flatten_grads(net.param_gradients(x, y))
        numeric = flatten_grads(numeric_param_gradients(net, x, y))
        assert relative_error(analytic, numeric) < 1e-4

    @pytest.mark.parametrize("trial", range(10))
    def test_input_gradient_matches_finite_differences(self, trial):
        net, x, y = tiny_net(trial)
        numeric = numeric_input_gradient(lambda v: net.loss(v, y[:1]), x[:1])
        assert relative_error(net.input_gradient(x[:1], y[:1]), numeric) < 1e-4

    def test_duplicated_sample_same_gradient(self):
        net, x, y = tiny_net(2)
        one = flatten_grads(net.param_gradients(x[:1], y[:1]))
        two = flatten_grads(net.param_gradients(np.repeat(x[:1], 2, axis=0), np.repeat(y[:1], 2)))
        for a, b in zip(one, two):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_zero_input_zero_weight_gradient(self):
        net = linear_net(np.random.default_rng(0).normal(size=(3, 4)), np.zeros(4))
        g = net.param_gradients(np.zeros((1, 3)), [2])[0]
        np.testing.assert_array_equal(g["W"], 0.0)
        assert np.any(g["b"] != 0)

    def test_unused_pixel_has_zero_gradient(self):
        W = np.random.default_rng(1).normal(size=(4, 3))
        W[2] = 0.0
        net = linear_net(W, np.zeros(3))
        g = net.input_gradient(np.array([0.1, 0.5, 0.9, 0.3]), 1)
        assert g[2] == 0.0 and np.any(g != 0)

    def test_linear_softmax_closed_form(self):
        rng = np.random.default_rng(3)
        W = rng.normal(size=(5, 3))
        b = rng.normal(size=3)
        net = linear_net(W, b)
        x = rng.uniform(size=5)
        z = x @ W + b
        p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        onehot = np.eye(3)[1]
        np.testing.assert_allclose(net.input_gradient(x, 1), W @ (p - onehot), rtol=1e-10)

    def test_logit_jacobian_of_linear_model_is_weights(self):
        rng = np.random.default_rng(4)
        W = rng.normal(size=(4, 3))
        net = linear_net(W, np.zeros(3))
        _, J = net.logit_jacobian(rng.uniform(size=4))
        np.testing.assert_allclose(J, W.T)

    def test_maxpool_routes_to_argmax_only(self):
        pool = MaxPool2x2()
        pool.build((1, 4, 4), None)
        x = np.random.default_rng(5).permutation(16).astype(float).reshape(1, 1, 4, 4)
        out, cache = pool.forward(x)
        dout = np.random.default_rng(6).normal(size=out.shape)
        dx, _ = pool.backward(dout, cache)
        numeric = numeric_input_gradient(lambda v: float((pool.forward(v)[0] * dout).sum()), x)
        np.testing.assert_allclose(dx, numeric, atol=1e-8)
        assert np.count_nonzero(dx) == 4


def blobs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    centers = np.array([[-2.0, -2.0], [2.0, 2.0]])
    return centers[y] + rng.normal(0, 0.5, size=(n, 2)), y


class TestTraining:
    def test_separable_blobs_reach_99_percent(self):
        X, y = blobs()
        net = Network(NetworkConfig((2,), [], 2, seed=0))
        _, hist = train(net, X, y, TrainConfig(100, 16, 0.1, 0.9, [], 10.0, seed=0))
        assert hist[-1]["accuracy"] >= 0.99

    def test_identical_seeds_bitwise_identical(self):
        X, y = blobs(64)
        layers = [{"kind": "dense", "units": 8}, {"kind": "relu"}, {"kind": "dropout", "p": 0.5}]
        runs = []
        for _ in range(2):
            net = Network(NetworkConfig((2,), layers, 2, seed=7))
            train(net, X, y, TrainConfig(5, 8, 0.05, 0.9, [3], 10.0, seed=7))
            runs.append([a.copy() for _, _, a in net.parameters()])
        for a, b in zip(*runs):
            np.testing.assert_array_equal(a, b)

    def test_different_seeds_different_init(self):
        a = Network(NetworkConfig((3,), [{"kind": "dense", "units": 4}], 2, seed=1))
        b = Network(NetworkConfig((3,), [{"kind": "dense", "units": 4}], 2, seed=2))
        assert not np.array_equal(a.layers[0].params["W"], b.layers[0].params["W"])

    def test_long_schedule_rate_at_epoch_120(self):
        cfg = TrainConfig(150, 128, 0.1, 0.9, [50, 100], 10.0)
        assert learning_rate(cfg, 120) == pytest.approx(0.001)
        assert learning_rate(cfg, 49) == pytest.approx(0.1)
        assert learning_rate(cfg, 50) == pytest.approx(0.01)

    def test_decay_epochs_validated(self):
        with pytest.raises(ValueError):
            TrainConfig(10, 8, 0.1, 0.9, [5, 5])
        with pytest.raises(ValueError):
            TrainConfig(10, 8, 0.1, 0.9, [10])

    def test_memorisation_loss_decreases(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(size=(32, 6))
        y = rng.integers(0, 4, size=32)
        net = Network(NetworkConfig((6,), [{"kind": "dense", "units": 16}, {"kind": "relu"}], 4, seed=0))
        _, hist = train(net, X, y, TrainConfig(50, 8, 0.05, 0.9, [], 10.0))
        assert hist[50]["loss"] < hist[0]["loss"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self):
        from advreject.nn import TrainingDivergedError

        X, y = blobs(32)
        net = Network(NetworkConfig((2,), [{"kind": "dense", "units": 8}, {"kind": "relu"}], 2, seed=0))
        with pytest.raises(TrainingDivergedError):
            train(net, X * 1e150, y, TrainConfig(3, 8, 1e10, 0.9, []))


class TestAccuracy:
    def test_counts(self):
        net = linear_net(np.eye(2), np.zeros(2))
        X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        assert evaluate_accuracy(net, X[:1], [0]) == 1.0
        assert evaluate_accuracy(net, X, [1, 0, 1, 0]) == 0.0
        assert evaluate_accuracy(net, X, [0, 1, 0, 0]) == 0.75

    def test_ties_go_to_lowest_index(self):
        net = linear_net(np.zeros((2, 3)), np.zeros(3))
        assert evaluate_accuracy(net, np.zeros((1, 2)), [0]) == 1.0


class TestPersistence:
    def test_round_trip_is_lossless(self):
        net, x, _ = tiny_net(3)
        doc = json.loads(json.dumps(network_to_dict(net)))
        loaded = network_from_dict(doc)
        for (_, _, a), (_, _, b) in zip(net.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(net.forward(x), loaded.forward(x))

    def test_document_layout(self):
        doc = network_to_dict(tiny_net(0)[0])
        assert doc["format_version"] == 1
        assert doc["layers"][-1]["kind"] == "softmax"
        assert {"kind", "shape", "weights"} <= set(doc["layers"][0])

    def test_bad_version_and_shape_rejected(self):
        doc = network_to_dict(tiny_net(0)[0])
        with pytest.raises(ModelFormatError):
            network_from_dict({**doc, "format_version": 2})
        doc["layers"][0]["shape"] = [1, 1]
        with pytest.raises(ModelFormatError):
            network_from_dict(doc)


class TestEstimator:
    def test_fit_predict_and_params(self):
        X, y = blobs()
        clf = NeuralNetClassifier(epochs=20, batch_size=16, learning_rate=0.1, decay_epochs=())
        assert clf.get_params()["epochs"] == 20
        clf.fit(X, y)
        assert clf.score(X, y) >= 0.99
        np.testing.assert_allclose(clf.predict_proba(X).sum(axis=1), 1.0, atol=1e-9)

    def test_clone_and_unfitted(self):
        from sklearn.base import clone
        from sklearn.exceptions import NotFittedError

        clf = clone(NeuralNetClassifier(epochs=3))
        with pytest.raises(NotFittedError):
            clf.predict(np.zeros((1, 2)))
