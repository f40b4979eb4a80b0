"""Model tests: dimensions, stable losses, and gradients vs finite differences."""

import math

import numpy as np
import pytest

from banditfl.errors import DataError, DimensionMismatchError
from banditfl.models import (
    MlpSpec,
    ModelParams,
    SoftmaxRegressionSpec,
    evaluate,
    init_params,
    layer_dims,
    loss_and_gradient,
    param_count,
    per_sample_losses,
)

SPECS = [
    SoftmaxRegressionSpec(n_features=4, n_classes=3),
    SoftmaxRegressionSpec(n_features=1, n_classes=2),
    MlpSpec(n_features=5, hidden_width=7, n_classes=4),
    MlpSpec(n_features=3, hidden_width=2, n_classes=2),
]


def random_batch(spec, rng, size=6):
    x = rng.standard_normal((size, layer_dims(spec)[0]))
    y = rng.integers(0, layer_dims(spec)[-1], size=size)
    return x, y


class TestShapes:
    def test_softmax_param_count(self):
        assert param_count(SoftmaxRegressionSpec(2, 2)) == 6

    def test_mlp_param_count(self):
        assert param_count(MlpSpec(784, 64, 10)) == 50890

    def test_init_is_deterministic(self):
        spec = MlpSpec(5, 4, 3)
        a = init_params(spec, np.random.default_rng(42))
        b = init_params(spec, np.random.default_rng(42))
        assert np.array_equal(a.values, b.values)

    def test_init_biases_are_zero(self):
        spec = SoftmaxRegressionSpec(3, 2)
        params = init_params(spec, np.random.default_rng(0))
        assert np.array_equal(params.values[6:], np.zeros(2))

    def test_param_vector_length_is_validated(self):
        with pytest.raises(ValueError):
            ModelParams(np.zeros(5), (2, 2))


class TestLoss:
    def test_uniform_logits_give_log_num_classes(self):
        spec = SoftmaxRegressionSpec(4, 10)
        params = ModelParams(np.zeros(param_count(spec)), layer_dims(spec))
        rng = np.random.default_rng(0)
        x, y = random_batch(spec, rng, size=20)
        loss, _ = loss_and_gradient(params, spec, x, y)
        assert loss == pytest.approx(math.log(10), abs=1e-12)

    def test_batch_duplication_leaves_loss_and_gradient_unchanged(self):
        spec = MlpSpec(4, 3, 3)
        rng = np.random.default_rng(1)
        params = init_params(spec, rng)
        x, y = random_batch(spec, rng)
        loss1, grad1 = loss_and_gradient(params, spec, x, y)
        loss2, grad2 = loss_and_gradient(
            params, spec, np.concatenate([x, x]), np.concatenate([y, y])
        )
        assert loss1 == pytest.approx(loss2, abs=1e-12)
        assert np.allclose(grad1, grad2, atol=1e-12)

    def test_loss_nonnegative_under_extreme_logits(self):
        spec = SoftmaxRegressionSpec(2, 3)
        params = ModelParams(np.full(param_count(spec), 50.0), layer_dims(spec))
        x = np.array([[1000.0, -1000.0]])
        loss, grad = loss_and_gradient(params, spec, x, np.array([1]))
        assert np.isfinite(loss) and loss >= 0.0
        assert np.all(np.isfinite(grad))

    def test_per_sample_losses_mean_matches_loss(self):
        spec = SoftmaxRegressionSpec(3, 4)
        rng = np.random.default_rng(3)
        params = init_params(spec, rng)
        x, y = random_batch(spec, rng, size=9)
        loss, _ = loss_and_gradient(params, spec, x, y)
        assert per_sample_losses(params, spec, x, y).mean() == pytest.approx(loss, abs=1e-12)

    def test_label_out_of_range(self):
        spec = SoftmaxRegressionSpec(2, 2)
        params = init_params(spec, np.random.default_rng(0))
        with pytest.raises(DataError):
            loss_and_gradient(params, spec, np.zeros((1, 2)), np.array([2]))

    def test_feature_width_mismatch(self):
        spec = SoftmaxRegressionSpec(2, 2)
        params = init_params(spec, np.random.default_rng(0))
        with pytest.raises(DimensionMismatchError):
            loss_and_gradient(params, spec, np.zeros((1, 3)), np.array([0]))


def finite_difference_gradient(params, spec, x, y, step=1e-5):
    values = params.values
    grad = np.zeros_like(values)
    for j in range(values.size):
        plus = values.copy()
        minus = values.copy()
        plus[j] += step
        minus[j] -= step
        lp, _ = loss_and_gradient(ModelParams(plus, params.layer_dims), spec, x, y)
        lm, _ = loss_and_gradient(ModelParams(minus, params.layer_dims), spec, x, y)
        grad[j] = (lp - lm) / (2.0 * step)
    return grad


@pytest.mark.parametrize("spec", SPECS, ids=str)
def test_gradient_matches_central_differences(spec):
    rng = np.random.default_rng(2024)
    for _ in range(20):
        params = init_params(spec, rng)
        params.values = params.values + 0.3 * rng.standard_normal(params.values.size)
        x, y = random_batch(spec, rng, size=int(rng.integers(2, 8)))
        _, analytic = loss_and_gradient(params, spec, x, y)
        fd = finite_difference_gradient(params, spec, x, y)
        rel = np.linalg.norm(analytic - fd) / (np.linalg.norm(fd) + 1e-12)
        assert rel <= 1e-4


class TestEvaluate:
    def test_separable_toy_set_with_oracle_params(self):
        spec = SoftmaxRegressionSpec(2, 2)
        # logits = [w.x, -w.x] with w = (1, 0): sign of x0 decides the class
        params = ModelParams(np.array([10.0, -10.0, 0.0, 0.0, 0.0, 0.0]), (2, 2))
        x = np.array([[1.0, 0.3], [2.0, -1.0], [-1.5, 0.2], [-0.5, -2.0]])
        y = np.array([0, 0, 1, 1])
        accuracy, _ = evaluate(params, spec, x, y)
        assert accuracy == 1.0

    def test_random_labels_sit_near_chance(self):
        spec = SoftmaxRegressionSpec(3, 10)
        rng = np.random.default_rng(7)
        params = init_params(spec, rng)
        x = rng.standard_normal((4000, 3))
        y = rng.integers(0, 10, size=4000)
        accuracy, _ = evaluate(params, spec, x, y)
        assert abs(accuracy - 0.1) <= 0.02

    def test_argmax_ties_break_to_lowest_class(self):
        spec = SoftmaxRegressionSpec(1, 3)
        params = ModelParams(np.zeros(param_count(spec)), (1, 3))
        accuracy, _ = evaluate(params, spec, np.array([[1.0]]), np.array([0]))
        assert accuracy == 1.0
