import copy
import math

import numpy as np
import pytest

from conftest import model_analytic_grads, model_numeric_grads
from ndlinear import layer, nn
from ndlinear.oracle import max_rel_err
from ndlinear.tensor import ShapeError, make_rng


def small_mse_model(seed=0):
    rng = make_rng(seed)
    return nn.Model(
        [nn.NdLinear(layer.init_xavier((2, 3), (3, 2), True, rng)),
         nn.ReLU(),
         nn.Dense(rng.standard_normal((6, 4)), rng.standard_normal(4))],
        "mse", (2, 3))


class TestLayers:
    def test_dense_identity_passthrough(self):
        model = nn.Model([nn.Dense(np.eye(3))], "mse", (3,))
        x = make_rng(0).standard_normal((4, 3))
        y, _ = nn.model_forward(model, x)
        assert np.array_equal(y, x)

    def test_relu(self):
        y, _ = nn.ReLU().forward(np.array([-1.0, 2.0]))
        assert y.tolist() == [0.0, 2.0]

    def test_relu_grad_zero_at_tie(self):
        lyr = nn.ReLU()
        y, cache = lyr.forward(np.array([0.0, -1.0, 3.0]))
        d_x, _ = lyr.backward(cache, np.ones(3))
        assert d_x.tolist() == [0.0, 0.0, 1.0]

    def test_tabular_classifier_shape(self):
        # front layer (11, 1) -> (11, 64), ReLU, then a 2-way head
        rng = make_rng(1)
        model = nn.Model(
            [nn.NdLinear(layer.init_xavier((11, 1), (11, 64), True, rng)),
             nn.ReLU(),
             nn.init_dense(11 * 64, 2, True, rng)],
            "cross_entropy", (11, 1))
        x = rng.standard_normal((5, 11, 1))
        y, _ = nn.model_forward(model, x)
        assert y.shape == (5, 2)

    def test_reshape_preserves_data(self):
        model = nn.Model([nn.Reshape((6,))], "mse", (2, 3))
        x = make_rng(2).standard_normal((2, 2, 3))
        y, _ = nn.model_forward(model, x)
        assert np.array_equal(y.reshape(-1), x.reshape(-1))

    def test_shape_mismatch_at_build(self):
        with pytest.raises(ShapeError, match="layer 1"):
            nn.Model([nn.Reshape((6,)), nn.Dense(np.eye(5))], "mse", (2, 3))

    def test_cross_entropy_needs_flat_output(self):
        with pytest.raises(ShapeError):
            nn.Model([nn.Reshape((2, 3))], "cross_entropy", (6,))


class TestLosses:
    def test_mse_convention(self):
        y = np.array([[1.0, 2.0], [3.0, 4.0]])
        t = np.zeros((2, 2))
        loss, d = nn.mse_loss(y, t)
        assert loss == (1 + 4 + 9 + 16) / 4  # mean over batch * features
        assert np.array_equal(d, 2.0 * y / 4)

    def test_softmax_ce_matches_manual(self):
        logits = np.array([[1.0, 2.0, 0.5]])
        labels = np.array([1])
        loss, d = nn.softmax_cross_entropy(logits, labels)
        probs = np.exp(logits[0]) / np.exp(logits[0]).sum()
        assert abs(loss + math.log(probs[1])) < 1e-12
        assert np.allclose(d[0], probs - np.eye(3)[1], atol=1e-12)

    def test_softmax_ce_stable_at_huge_logits(self):
        logits = np.array([[1e3, -1e3], [-1e3, 1e3]])
        loss, d = nn.softmax_cross_entropy(logits, np.array([0, 0]))
        assert math.isfinite(loss)
        assert np.all(np.isfinite(d))

    def test_row_gradients_sum_to_zero(self):
        rng = make_rng(3)
        logits = rng.standard_normal((4, 5))
        _, d = nn.softmax_cross_entropy(logits, rng.integers(0, 5, size=4))
        assert np.allclose(d.sum(axis=1), 0.0, atol=1e-15)


class TestBackward:
    def test_single_dense_mse_hand_rule(self):
        rng = make_rng(4)
        w = rng.standard_normal((3, 2))
        x = rng.standard_normal((1, 3))
        t = rng.standard_normal((1, 2))
        model = nn.Model([nn.Dense(w)], "mse", (3,))
        y, caches = nn.model_forward(model, x)
        _, d_y = nn.mse_loss(y, t)
        grads, _ = nn.model_backward(model, caches, d_y)
        # dL/dW = x^T (2 (y - t) / (B * M))
        assert np.allclose(grads[0], x.T @ (2.0 * (y - t) / y.size), atol=1e-14)

    def test_dead_relu_blocks_gradient(self):
        model = nn.Model([nn.Dense(-np.eye(2)), nn.ReLU(), nn.Dense(np.eye(2))],
                         "mse", (2,))
        x = np.ones((3, 2))  # pre-activations all -1
        y, caches = nn.model_forward(model, x)
        grads, d_x = nn.model_backward(model, caches, np.ones_like(y))
        assert np.all(grads[0] == 0.0)  # first dense never sees a signal
        assert np.all(d_x == 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_whole_model_matches_finite_differences(self, seed):
        model = small_mse_model(seed)
        rng = make_rng(100 + seed)
        x = rng.standard_normal((3, 2, 3))
        t = rng.standard_normal((3, 4))
        analytic = model_analytic_grads(model, x, t)
        numeric = model_numeric_grads(model, x, t)
        worst = max(max_rel_err(a, b) for a, b in zip(analytic, numeric))
        assert worst < 1e-5

    def test_classifier_matches_finite_differences(self):
        rng = make_rng(6)
        model = nn.Model(
            [nn.init_dense(4, 8, True, rng), nn.ReLU(), nn.init_dense(8, 3, True, rng)],
            "cross_entropy", (4,))
        x = rng.standard_normal((5, 4))
        t = rng.integers(0, 3, size=5)
        analytic = model_analytic_grads(model, x, t)
        numeric = model_numeric_grads(model, x, t)
        worst = max(max_rel_err(a, b) for a, b in zip(analytic, numeric))
        assert worst < 1e-5


class TestTraining:
    def _data(self, seed=0):
        return nn.gen_separable_regression(make_rng(seed), 80, (3, 2), (2, 3),
                                           noise_sigma=0.1)

    def test_zero_lr_changes_nothing(self):
        model = nn.Model(
            [nn.NdLinear(layer.init_xavier((3, 2), (2, 3), False, make_rng(1)))],
            "mse", (3, 2))
        before = [p.copy() for p in model.params()]
        res = nn.train(model, self._data(), nn.TrainConfig(epochs=3, seed=0),
                       nn.SGD(lr=0.0))
        assert all(np.array_equal(a, b) for a, b in zip(before, model.params()))
        losses = [r["train_loss"] for r in res.log]
        assert losses[0] == losses[1] == losses[2]

    def test_deterministic_log(self):
        def run():
            model = nn.Model(
                [nn.NdLinear(layer.init_xavier((3, 2), (2, 3), False, make_rng(1)))],
                "mse", (3, 2))
            return nn.train(model, self._data(), nn.TrainConfig(epochs=4, seed=9),
                            nn.Adam(1e-2)).log
        assert run() == run()

    def test_separable_classification_sanity(self):
        rng = make_rng(5)
        data = nn.gen_blob_classification(rng, 400, features=4, sep=6.0)
        model = nn.Model([nn.init_dense(4, 2, True, make_rng(2))],
                         "cross_entropy", (4, 1))
        res = nn.train(model, data, nn.TrainConfig(epochs=40, seed=0, lr=0.05),
                       nn.Adam(0.05))
        assert res.final["train_accuracy"] >= 0.95

    def test_noise_free_realizable_converges(self):
        data = nn.gen_separable_regression(make_rng(11), 320, (8, 8), (8, 8),
                                           noise_sigma=0.0)
        model = nn.Model(
            [nn.NdLinear(layer.init_xavier((8, 8), (8, 8), False, make_rng(3)))],
            "mse", (8, 8))
        # 8 batches/epoch * 250 epochs = 2000 optimizer steps
        res = nn.train(model, data, nn.TrainConfig(epochs=250, seed=0, lr=1e-2),
                       nn.Adam(1e-2))
        assert res.final["test_loss"] < 1e-6

    @pytest.mark.filterwarnings("ignore:overflow")  # blow-up is the point
    def test_divergence_aborts(self):
        model = nn.Model(
            [nn.NdLinear(layer.init_xavier((3, 2), (2, 3), False, make_rng(1)))],
            "mse", (3, 2))
        with pytest.raises(nn.TrainingDiverged, match="epoch"):
            nn.train(model, self._data(), nn.TrainConfig(epochs=50, seed=0),
                     nn.SGD(lr=1e12))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            nn.TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            nn.TrainConfig(split=1.0)
        with pytest.raises(ValueError):
            nn.TrainConfig(batch_size=0)

    def test_optimizers_reduce_loss(self):
        for opt in (nn.SGD(0.05, momentum=0.9), nn.Adam(0.01), nn.AdamW(0.01)):
            model = nn.Model(
                [nn.NdLinear(layer.init_xavier((3, 2), (2, 3), False, make_rng(1)))],
                "mse", (3, 2))
            res = nn.train(model, self._data(), nn.TrainConfig(epochs=10, seed=0),
                           opt)
            assert res.log[-1]["train_loss"] < res.log[0]["train_loss"]


class TestData:
    def test_identity_factors_copy_input(self):
        data = nn.gen_separable_regression(
            make_rng(0), 10, (3, 3), (3, 3), noise_sigma=0.0,
            factors=(np.eye(3), np.eye(3)))
        assert np.array_equal(data.y_train, data.x_train)
        assert np.array_equal(data.y_test, data.x_test)

    def test_deterministic(self):
        a = nn.gen_separable_regression(make_rng(7), 20, (2, 2), (2, 2), 0.1)
        b = nn.gen_separable_regression(make_rng(7), 20, (2, 2), (2, 2), 0.1)
        assert np.array_equal(a.x_train, b.x_train)
        assert np.array_equal(a.y_test, b.y_test)

    def test_split_counts(self):
        data = nn.gen_separable_regression(make_rng(0), 320, (2, 2), (2, 2), 0.0,
                                           split=0.8)
        assert len(data.x_train) == 256
        assert len(data.x_test) == 64

    def test_blobs_shapes_and_labels(self):
        data = nn.gen_blob_classification(make_rng(1), 50, features=11)
        assert data.x_train.shape[1:] == (11, 1)
        assert set(np.unique(np.concatenate([data.y_train, data.y_test]))) <= {0, 1}

    def test_bad_split(self):
        with pytest.raises(ValueError):
            nn.gen_separable_regression(make_rng(0), 5, (2, 2), (2, 2), 0.0,
                                        split=0.999)


class TestMatchedBaseline:
    def test_exact_match(self):
        assert nn.matched_dense_width(128, 64, 64) == 1

    def test_rounding_within_tolerance(self):
        # target 3 * 128 = 384 -> width 3 exactly
        assert nn.matched_dense_width(384, 64, 64) == 3

    def test_unmatchable(self):
        with pytest.raises(ValueError):
            nn.matched_dense_width(10, 64, 64)


class TestModelConfig:
    GOOD = {
        "layers": [
            {"type": "ndlinear", "in": [11, 1], "out": [11, 64], "bias": True},
            {"type": "relu"},
            {"type": "dense", "in": 704, "out": 2},
        ],
        "loss": "cross_entropy",
    }

    def test_builds(self):
        model = nn.build_model(self.GOOD, make_rng(0))
        assert model.in_dims == (11, 1)
        assert model.out_shape == (2,)

    def test_unknown_type(self):
        bad = copy.deepcopy(self.GOOD)
        bad["layers"][1]["type"] = "softplus"
        with pytest.raises(nn.ConfigError, match=r"layers\[1\].type"):
            nn.build_model(bad, make_rng(0))

    def test_bad_dims(self):
        bad = copy.deepcopy(self.GOOD)
        bad["layers"][0]["in"] = [11, 0]
        with pytest.raises(nn.ConfigError, match=r"layers\[0\].in"):
            nn.build_model(bad, make_rng(0))

    def test_bad_loss(self):
        bad = copy.deepcopy(self.GOOD)
        bad["loss"] = "hinge"
        with pytest.raises(nn.ConfigError, match="loss"):
            nn.build_model(bad, make_rng(0))

    def test_non_composing(self):
        bad = copy.deepcopy(self.GOOD)
        bad["layers"][2]["in"] = 100
        with pytest.raises(nn.ConfigError, match="compose"):
            nn.build_model(bad, make_rng(0))

    def test_first_layer_must_fix_shape(self):
        with pytest.raises(nn.ConfigError, match="first layer"):
            nn.build_model({"layers": [{"type": "relu"}], "loss": "mse"},
                           make_rng(0))

    def test_reshape_layer_roundtrip(self):
        config = {
            "layers": [
                {"type": "dense", "in": 6, "out": 6, "bias": False},
                {"type": "reshape", "dims": [2, 3]},
            ],
            "loss": "mse",
        }
        model = nn.build_model(config, make_rng(0))
        assert model.out_shape == (2, 3)


def test_separable_comparison_structure():
    summary = nn.run_separable_comparison(n_seeds=2, in_dims=(4, 4), out_dims=(4, 4),
                                          n_train=64, n_test=32, epochs=10)
    assert summary["params"]["ndlinear"] == 2 * 16
    assert summary["params"]["naive_dense"] == 256
    assert set(summary["median_test_mse"]) == {"ndlinear", "naive_dense", "matched_dense"}
    assert len(summary["test_mse"]["ndlinear"]) == 2
