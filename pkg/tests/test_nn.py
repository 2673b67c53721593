import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_differences, max_rel_error, random_two_exit
from splitgp.nn import (
    Activation,
    Dense,
    LayeredModel,
    NumericalError,
    ShapeError,
    backward_multi_exit,
    backward_single_exit,
    forward,
    init_mlp,
    sgd_step,
    softmax,
    softmax_cross_entropy,
)


class TestForward:
    def test_identity_layer(self):
        m = LayeredModel([Dense(np.eye(2), np.zeros(2)), Activation("identity")])
        np.testing.assert_array_equal(forward(m, [1.0, 2.0]), [1.0, 2.0])

    def test_relu(self):
        m = LayeredModel([Activation("relu")], input_dim=2)
        np.testing.assert_array_equal(forward(m, [-1.0, 3.0]), [0.0, 3.0])

    def test_affine(self):
        m = LayeredModel([Dense([[2.0, 0.0], [0.0, 3.0]], [1.0, 1.0])])
        np.testing.assert_array_equal(forward(m, [1.0, 1.0]), [3.0, 4.0])

    def test_batch_matches_rows(self, rng):
        m = init_mlp([4, 6, 3], rng)
        x = rng.normal(size=(5, 4))
        out = forward(m, x)
        for i in range(5):
            np.testing.assert_allclose(out[i], forward(m, x[i]), rtol=1e-13, atol=1e-15)

    def test_dimension_mismatch(self, rng):
        m = init_mlp([4, 3], rng)
        with pytest.raises(ShapeError):
            forward(m, np.ones(5))

    def test_chain_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            LayeredModel([Dense(np.ones((3, 2)), np.zeros(3)), Dense(np.ones((2, 4)), np.zeros(2))])

    def test_non_finite_parameters_rejected(self):
        with pytest.raises(NumericalError):
            Dense([[np.nan]], [0.0])

    def test_parameter_count(self, rng):
        m = init_mlp([10, 7, 3], rng)
        assert m.parameter_count == 10 * 7 + 7 + 7 * 3 + 3


class TestSoftmaxCrossEntropy:
    def test_symmetric(self):
        loss, p = softmax_cross_entropy([0.0, 0.0], 0)
        assert loss == pytest.approx(math.log(2), abs=1e-15)
        np.testing.assert_allclose(p, [0.5, 0.5])

    def test_large_logits_do_not_overflow(self):
        loss, p = softmax_cross_entropy([1000.0, 0.0], 0)
        assert loss == pytest.approx(0.0, abs=1e-300)
        assert np.all(np.isfinite(p))

    def test_uniform_ten_classes(self):
        for label in range(10):
            loss, _ = softmax_cross_entropy(np.ones(10), label)
            assert loss == pytest.approx(math.log(10), abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy([0.0, 1.0], 2)

    @given(st.lists(st.floats(-700, 700), min_size=2, max_size=12))
    def test_normalized(self, logits):
        assert abs(softmax(logits).sum() - 1.0) <= 1e-12


class TestBackwardMultiExit:
    def test_gamma_zero_gives_zero_head_gradient(self, rng):
        phi, h, theta = random_two_exit(rng)
        x = rng.normal(size=(6, phi.input_dim))
        y = rng.integers(0, theta.output_dim, 6)
        g = backward_multi_exit(phi, h, theta, x, y, 0.0)
        assert all(np.all(b == 0) for b in g.h)

    def test_gamma_one_gives_zero_server_gradient(self, rng):
        phi, h, theta = random_two_exit(rng)
        x = rng.normal(size=(6, phi.input_dim))
        y = rng.integers(0, theta.output_dim, 6)
        g = backward_multi_exit(phi, h, theta, x, y, 1.0)
        assert all(np.all(b == 0) for b in g.theta)

    def test_loss_decomposition(self, rng):
        phi, h, theta = random_two_exit(rng)
        x = rng.normal(size=(9, phi.input_dim))
        y = rng.integers(0, theta.output_dim, 9)
        for gamma in (0.0, 0.3, 0.5, 1.0):
            g = backward_multi_exit(phi, h, theta, x, y, gamma)
            assert abs(g.objective - (gamma * g.loss_client + (1 - gamma) * g.loss_server)) <= 1e-12

    def test_empty_batch(self, rng):
        phi, h, theta = random_two_exit(rng)
        with pytest.raises(ValueError):
            backward_multi_exit(phi, h, theta, np.zeros((0, phi.input_dim)), [], 0.5)

    def test_gamma_out_of_range(self, rng):
        phi, h, theta = random_two_exit(rng)
        with pytest.raises(ValueError):
            backward_multi_exit(phi, h, theta, np.zeros((1, phi.input_dim)), [0], 1.5)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        phi, h, theta = random_two_exit(rng)
        x = rng.normal(size=(7, phi.input_dim))
        y = rng.integers(0, theta.output_dim, 7)
        gamma = float(rng.uniform())
        g = backward_multi_exit(phi, h, theta, x, y, gamma)
        for model, analytic in ((phi, g.phi), (h, g.h), (theta, g.theta)):
            blocks = model.params()
            numeric = central_differences(
                lambda: backward_multi_exit(phi, h, theta, x, y, gamma).objective, blocks
            )
            assert max_rel_error(analytic, numeric) <= 1e-4

    def test_weighted_mean_equals_uniform_weights(self, rng):
        phi, h, theta = random_two_exit(rng)
        x = rng.normal(size=(5, phi.input_dim))
        y = rng.integers(0, theta.output_dim, 5)
        a = backward_multi_exit(phi, h, theta, x, y, 0.4)
        b = backward_multi_exit(phi, h, theta, x, y, 0.4, weights=np.full(5, 0.2))
        for ga, gb in zip(a.phi + a.h + a.theta, b.phi + b.h + b.theta):
            np.testing.assert_allclose(ga, gb, rtol=1e-12, atol=1e-15)

    def test_single_exit_matches_server_branch(self, rng):
        phi, h, theta = random_two_exit(rng)
        x = rng.normal(size=(5, phi.input_dim))
        y = rng.integers(0, theta.output_dim, 5)
        multi = backward_multi_exit(phi, h, theta, x, y, 0.0)
        single, loss = backward_single_exit(phi + theta, x, y)
        assert loss == multi.loss_server
        for a, b in zip(single, multi.phi + multi.theta):
            np.testing.assert_array_equal(a, b)

    def test_deterministic(self, rng):
        phi, h, theta = random_two_exit(rng)
        x = rng.normal(size=(5, phi.input_dim))
        y = rng.integers(0, theta.output_dim, 5)
        a = backward_multi_exit(phi, h, theta, x, y, 0.5)
        b = backward_multi_exit(phi, h, theta, x, y, 0.5)
        for ga, gb in zip(a.phi + a.h + a.theta, b.phi + b.h + b.theta):
            assert ga.tobytes() == gb.tobytes()


class TestSgdStep:
    def _scalar(self, v):
        return LayeredModel([Dense([[v]], [0.0])])

    def test_zero_gradient(self, rng):
        m = init_mlp([3, 4, 2], rng)
        out = sgd_step(m, [np.zeros_like(p) for p in m.params()], 0.1)
        for a, b in zip(m.params(), out.params()):
            np.testing.assert_array_equal(a, b)

    def test_scalar_arithmetic(self):
        out = sgd_step(self._scalar(1.0), [np.array([[2.0]]), np.array([0.0])], 0.1)
        assert out.params()[0][0, 0] == pytest.approx(0.8, abs=1e-15)

    def test_two_steps_equal_one_double_step(self, rng):
        m = init_mlp([3, 2], rng)
        g = [rng.normal(size=p.shape) for p in m.params()]
        twice = sgd_step(sgd_step(m, g, 0.05), g, 0.05)
        once = sgd_step(m, g, 0.1)
        for a, b in zip(twice.params(), once.params()):
            np.testing.assert_allclose(a, b, atol=1e-15)

    def test_does_not_mutate(self, rng):
        m = init_mlp([3, 2], rng)
        before = [p.copy() for p in m.params()]
        sgd_step(m, [np.ones_like(p) for p in m.params()], 0.1)
        for a, b in zip(before, m.params()):
            np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self, rng):
        m = init_mlp([3, 2], rng)
        with pytest.raises(ShapeError):
            sgd_step(m, [np.zeros((1, 1)), np.zeros(2)], 0.1)

    def test_non_positive_rate(self, rng):
        m = init_mlp([3, 2], rng)
        with pytest.raises(ValueError):
            sgd_step(m, [np.zeros_like(p) for p in m.params()], 0.0)


class TestCheckpoint:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_round_trip_is_bitwise(self, seed):
        rng = np.random.default_rng(seed)
        m = init_mlp([5, 7, 3], rng)
        m = m.with_params([p + rng.normal(size=p.shape) * 1e-3 for p in m.params()])
        back = LayeredModel.from_json(m.to_json())
        assert [l.fn for l in back.layers if isinstance(l, Activation)] == ["relu"]
        for a, b in zip(m.params(), back.params()):
            assert a.tobytes() == b.tobytes()

    def test_init_bounds(self, rng):
        m = init_mlp([6, 10, 4], rng)
        for layer in m.layers:
            if isinstance(layer, Dense):
                limit = math.sqrt(6 / (layer.in_dim + layer.out_dim))
                assert np.all(np.abs(layer.weight) <= limit)
                assert np.all(layer.bias == 0)
