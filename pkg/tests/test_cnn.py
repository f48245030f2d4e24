"""Layer math, losses, gradients, and the optimizer (all float64)."""

import numpy as np
import pytest

from monofuse import cnn

from conftest import make_toy_model


def finite_difference_check(model, x, labels, rng, samples_per_tensor=12,
                            eps=1e-5):
    """Sampled central-difference check; returns the worst relative error."""
    probs, cache = cnn.forward(model, x)
    grads = cnn.backward(model, cache, labels)
    worst = 0.0
    for i, _, layer in model.param_layers():
        gw, gb = grads.layers[i]
        for arr, garr in ((layer.weights, gw), (layer.biases, gb)):
            flat, gflat = arr.ravel(), garr.ravel()
            count = min(samples_per_tensor, flat.size)
            for j in rng.choice(flat.size, size=count, replace=False):
                old = flat[j]
                flat[j] = old + eps
                up = cnn.batch_loss(cnn.forward(model, x)[0], labels)
                flat[j] = old - eps
                down = cnn.batch_loss(cnn.forward(model, x)[0], labels)
                flat[j] = old
                numeric = (up - down) / (2 * eps)
                denom = max(abs(numeric), abs(gflat[j]), 1e-8)
                worst = max(worst, abs(numeric - gflat[j]) / denom)
    return worst


class TestForward:
    def test_identity_conv_relu(self):
        # 1x1 conv with weight 1, bias 0, then ReLU: a non-negative image
        # passes through unchanged
        conv = cnn.Conv(
            out_channels=1,
            kernel=(1, 1),
            weights=np.ones((1, 1, 1, 1)),
            biases=np.zeros(1),
        )
        x = np.abs(np.random.default_rng(0).standard_normal((1, 1, 4, 4)))
        out, _ = cnn._conv_forward(conv, x)
        np.testing.assert_allclose(out, x, atol=1e-12)
        np.testing.assert_array_equal(np.maximum(out, 0.0), out)

    def test_maxpool_two_by_two(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out, _ = cnn._pool_forward(cnn.MaxPool(), x)
        np.testing.assert_array_equal(out, [[[[4.0]]]])

    def test_maxpool_drops_odd_trailing(self):
        x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
        out, _ = cnn._pool_forward(cnn.MaxPool(), x)
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(out[0, 0], [[6.0, 8.0], [16.0, 18.0]])

    def test_zero_dense_gives_uniform_softmax(self):
        model = cnn.CnnModel(
            layers=[
                cnn.Flatten(),
                cnn.Dense(
                    out_features=3, weights=np.zeros((3, 4)), biases=np.zeros(3)
                ),
                cnn.Softmax(),
            ],
            input_shape=(1, 2, 2),
            num_classes=3,
            seed=0,
        )
        probs, _ = cnn.forward(model, np.ones((2, 1, 2, 2)))
        np.testing.assert_allclose(probs, 1.0 / 3.0, atol=1e-12)

    def test_softmax_rows_sum_to_one(self, toy_model):
        x = np.random.default_rng(1).standard_normal((4, 1, 12, 12))
        probs, _ = cnn.forward(toy_model, x)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert (probs > 0).all()

    def test_shape_mismatch_rejected(self, toy_model):
        with pytest.raises(ValueError):
            cnn.forward(toy_model, np.zeros((1, 1, 10, 10)))


class TestLrn:
    def test_identity_when_alpha_zero_k_one(self):
        x = np.random.default_rng(2).standard_normal((2, 3, 4, 4))
        layer = cnn.Lrn(radius=2, alpha=0.0, beta=0.75, k=1.0)
        out, _ = cnn._lrn_forward(layer, x)
        np.testing.assert_array_equal(out, x)

    def test_zeros_stay_zero(self):
        out, _ = cnn._lrn_forward(cnn.Lrn(), np.zeros((1, 4, 2, 2)))
        np.testing.assert_array_equal(out, 0.0)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 4, 2, 2))
        layer = cnn.Lrn(radius=2, alpha=1e-4, beta=0.75, k=2.0)
        out, _ = cnn._lrn_forward(layer, x)
        channels = x.shape[1]
        for c in range(channels):
            lo, hi = max(0, c - layer.radius), min(channels, c + layer.radius + 1)
            for r in range(2):
                for cc in range(2):
                    acc = sum(x[0, d, r, cc] ** 2 for d in range(lo, hi))
                    ref = x[0, c, r, cc] / (layer.k + layer.alpha * acc) ** layer.beta
                    assert out[0, c, r, cc] == pytest.approx(ref, abs=1e-12)

    def test_public_three_dim_wrapper(self):
        x = np.random.default_rng(4).standard_normal((4, 3, 3))
        out = cnn.lrn_forward(x, radius=2, alpha=1e-4, beta=0.75, k=2.0)
        assert out.shape == x.shape
        batched, _ = cnn._lrn_forward(cnn.Lrn(), x[None])
        np.testing.assert_array_equal(out, batched[0])


class TestLoss:
    def test_confident_correct_is_zero(self):
        assert cnn.loss(np.array([1.0, 0.0, 0.0]), 0) == pytest.approx(0.0)

    def test_uniform_is_log_classes(self):
        probs = np.full(3, 1.0 / 3.0)
        assert cnn.loss(probs, 1) == pytest.approx(np.log(3.0), abs=1e-12)

    def test_quarter_probability(self):
        probs = np.array([0.5, 0.25, 0.25])
        assert cnn.loss(probs, 1) == pytest.approx(np.log(4.0), abs=1e-12)

    def test_zero_probability_clamped(self):
        value = cnn.loss(np.array([1.0, 0.0]), 1)
        assert np.isfinite(value)
        assert value == pytest.approx(-np.log(1e-12))

    def test_batch_loss_is_mean(self):
        probs = np.array([[1.0, 0.0], [0.5, 0.5]])
        expected = (0.0 + -np.log(0.5)) / 2.0
        assert cnn.batch_loss(probs, np.array([0, 1])) == pytest.approx(expected)


class TestBackward:
    def test_gradient_check_sampled(self, toy_model):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 1, 12, 12))
        labels = np.array([0, 1, 2])
        worst = finite_difference_check(toy_model, x, labels, rng)
        assert worst < 1e-4

    def test_converged_prediction_has_tiny_dense_gradient(self):
        # force near-one-hot probabilities via huge logits
        model = cnn.CnnModel(
            layers=[
                cnn.Flatten(),
                cnn.Dense(
                    out_features=2,
                    weights=np.array([[1000.0, 0, 0, 0], [-1000.0, 0, 0, 0]]),
                    biases=np.zeros(2),
                ),
                cnn.Softmax(),
            ],
            input_shape=(1, 2, 2),
            num_classes=2,
            seed=0,
        )
        x = np.ones((1, 1, 2, 2))
        probs, cache = cnn.forward(model, x)
        grads = cnn.backward(model, cache, np.array([0]))
        gw, gb = grads.layers[1]
        assert np.abs(gw).max() < 1e-9 and np.abs(gb).max() < 1e-9

    def test_batch_duplication_keeps_mean_gradient(self, toy_model):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 1, 12, 12))
        labels = np.array([0, 2])
        _, cache1 = cnn.forward(toy_model, x)
        g1 = cnn.backward(toy_model, cache1, labels)
        x2 = np.concatenate([x, x])
        _, cache2 = cnn.forward(toy_model, x2)
        g2 = cnn.backward(toy_model, cache2, np.concatenate([labels, labels]))
        for a, b in zip(g1.layers, g2.layers):
            if a is None:
                continue
            np.testing.assert_allclose(a[0], b[0], atol=1e-12)
            np.testing.assert_allclose(a[1], b[1], atol=1e-12)

    def test_relu_blocks_gradient_at_dead_units(self):
        x = np.array([[-1.0, 2.0]])
        mask = x > 0
        out = np.maximum(x, 0.0)
        grad_in = np.ones_like(x) * mask
        assert grad_in[0, 0] == 0.0 and grad_in[0, 1] == 1.0


class TestOptimizer:
    def test_plain_sgd_when_velocity_zero(self, toy_model):
        state = cnn.OptimizerState.for_model(
            toy_model, learning_rate=0.1, momentum=0.9, l2=0.0
        )
        params_before = [p.copy() for p in toy_model.parameters()]
        glayers = [None] * len(toy_model.layers)
        for i, _, layer in toy_model.param_layers():
            glayers[i] = (
                np.ones_like(layer.weights),
                np.ones_like(layer.biases),
            )
        grads = cnn.GradientSet(layers=glayers)
        cnn.sgd_momentum_step(state, toy_model, grads)
        for before, after in zip(params_before, toy_model.parameters()):
            np.testing.assert_allclose(after, before - 0.1, atol=1e-12)

    def test_two_steps_constant_gradient(self):
        # with velocity starting at 0 and constant gradient g:
        # step 1 moves -a*g, step 2 moves -(1+rho)*a*g, total -(2+rho)*a*g
        model = cnn.CnnModel(
            layers=[
                cnn.Flatten(),
                cnn.Dense(out_features=2, weights=np.zeros((2, 4)),
                          biases=np.zeros(2)),
                cnn.Softmax(),
            ],
            input_shape=(1, 2, 2),
            num_classes=2,
            seed=0,
        )
        rho, alpha = 0.9, 0.01
        state = cnn.OptimizerState.for_model(model, alpha, rho, 0.0)
        g = np.full((2, 4), 2.0)
        glayers = [None, (g, np.zeros(2)), None]
        before = model.layers[1].weights.copy()
        cnn.sgd_momentum_step(state, model, cnn.GradientSet(layers=glayers))
        cnn.sgd_momentum_step(state, model, cnn.GradientSet(layers=glayers))
        expected = before - alpha * g * (2.0 + rho)
        np.testing.assert_allclose(model.layers[1].weights, expected, atol=1e-12)

    def test_l2_term_added_to_gradient(self):
        model = cnn.CnnModel(
            layers=[
                cnn.Flatten(),
                cnn.Dense(out_features=2, weights=np.full((2, 4), 3.0),
                          biases=np.zeros(2)),
                cnn.Softmax(),
            ],
            input_shape=(1, 2, 2),
            num_classes=2,
            seed=0,
        )
        lam, alpha = 0.5, 0.1
        state = cnn.OptimizerState.for_model(model, alpha, 0.0, lam)
        glayers = [None, (np.zeros((2, 4)), np.zeros(2)), None]
        cnn.sgd_momentum_step(state, model, cnn.GradientSet(layers=glayers))
        # effective gradient = lambda * w = 1.5 -> step -0.15
        np.testing.assert_allclose(
            model.layers[1].weights, 3.0 - alpha * lam * 3.0, atol=1e-12
        )

    def test_zero_learning_rate_is_identity(self, toy_model):
        state = cnn.OptimizerState.for_model(toy_model, 0.0, 0.9, 5e-4)
        before = [p.copy() for p in toy_model.parameters()]
        glayers = [None] * len(toy_model.layers)
        for i, _, layer in toy_model.param_layers():
            glayers[i] = (
                np.ones_like(layer.weights),
                np.ones_like(layer.biases),
            )
        cnn.sgd_momentum_step(state, toy_model, cnn.GradientSet(layers=glayers))
        for b, a in zip(before, toy_model.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_non_finite_gradient_aborts(self, toy_model):
        state = cnn.OptimizerState.for_model(toy_model, 0.1, 0.9, 0.0)
        glayers = [None] * len(toy_model.layers)
        for i, _, layer in toy_model.param_layers():
            gw = np.ones_like(layer.weights)
            glayers[i] = (gw, np.ones_like(layer.biases))
        glayers[0][0].flat[0] = np.nan
        before = [p.copy() for p in toy_model.parameters()]
        with pytest.raises(cnn.NonFiniteGradientError):
            cnn.sgd_momentum_step(
                state, toy_model, cnn.GradientSet(layers=glayers)
            )
        for b, a in zip(before, toy_model.parameters()):
            np.testing.assert_array_equal(a, b)  # aborted before mutation


class TestModelBuilder:
    def test_layer_shape_chain_for_large_input(self):
        model = cnn.build_recognition_model((192, 168), 34, seed=0)
        shapes = cnn.infer_shapes(model.layers, model.input_shape)
        assert shapes[0] == (50, 188, 164)   # conv1
        assert shapes[3] == (50, 94, 82)     # pool1 (after relu + lrn)
        assert shapes[4] == (50, 90, 78)     # conv2
        assert shapes[6] == (50, 45, 39)     # pool2
        assert shapes[7] == (87750,)         # flatten
        assert shapes[8] == (34,)            # dense

    def test_forward_is_finite_and_normalized(self):
        model = cnn.build_recognition_model((20, 20), 4, seed=1)
        x = np.random.default_rng(7).standard_normal((2, 1, 20, 20))
        probs, _ = cnn.forward(model, x)
        assert np.isfinite(probs).all()
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_seed_determinism(self):
        a = cnn.build_recognition_model((20, 20), 4, seed=5)
        b = cnn.build_recognition_model((20, 20), 4, seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa, pb)

    def test_too_small_input_rejected(self):
        with pytest.raises(ValueError):
            cnn.build_recognition_model((8, 8), 4)

    def test_first_ten_full_batch_steps_decrease_loss(self, toy_dataset):
        from monofuse import trainer

        raw = trainer.build_feature_dataset(
            toy_dataset, trainer.TrainConfig(feature_kind="raw", epochs=1)
        )
        model = make_toy_model(0)
        images = raw.stacked()[:, None, :, :]
        labels = raw.labels()
        state = cnn.OptimizerState.for_model(model, 1e-3, 0.9, 5e-4)
        losses = []
        for _ in range(10):
            probs, cache = cnn.forward(model, images)
            losses.append(cnn.batch_loss(probs, labels))
            grads = cnn.backward(model, cache, labels)
            cnn.sgd_momentum_step(state, model, grads)
        assert all(b < a for a, b in zip(losses, losses[1:]))
