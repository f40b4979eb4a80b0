"""Allocator unit and property tests.

Derived expected values are computed by independent oracles inside the
tests (extended-precision arithmetic, direct residual evaluation, dense
multiplier sweeps) rather than by the code under test.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from banditfl.allocator import (
    AllocatorConfig,
    KlBallConstraint,
    WeightVector,
    dual_step,
    floor_weights,
    kernel_f,
    kl_to_uniform,
    project,
    solve_lambda,
    update_weights,
)
from banditfl.errors import (
    BracketFailureError,
    DegenerateWeightsError,
    DimensionMismatchError,
)


def simplex_points(min_n=2, max_n=6):
    return (
        st.lists(st.floats(0.01, 10.0), min_size=min_n, max_size=max_n)
        .map(lambda xs: np.array(xs) / np.sum(xs))
    )


def loss_vectors_like(n):
    return st.lists(st.floats(-5.0, 5.0), min_size=n, max_size=n).map(np.array)


class TestWeightVector:
    def test_rejects_negative_entries(self):
        with pytest.raises(ValueError):
            WeightVector(np.array([-0.1, 1.1]))

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError):
            WeightVector(np.array([0.4, 0.4]))

    def test_log_space_skips_simplex_checks(self):
        WeightVector(np.array([-3.0, 2.0]), log_space=True)

    def test_uniform(self):
        assert np.allclose(WeightVector.uniform(4).values, 0.25)

    def test_constraint_validation(self):
        with pytest.raises(ValueError):
            KlBallConstraint(rho=-0.1, n_total=3)
        with pytest.raises(ValueError):
            KlBallConstraint(rho=0.5, n_total=0)


class TestDualStep:
    def test_zero_losses_leave_log_weights_unchanged(self):
        p = np.array([0.5, 0.5])
        out = dual_step(p, np.zeros(2), eta_b=1.0)
        assert out.log_space
        assert np.array_equal(out.values, np.log(p))

    def test_unit_loss_shifts_by_eta(self):
        out = dual_step(np.array([0.5, 0.5]), np.array([1.0, 0.0]), eta_b=1.0)
        assert out.values[0] == pytest.approx(math.log(0.5) + 1.0, abs=1e-15)
        assert out.values[1] == pytest.approx(math.log(0.5), abs=1e-15)

    def test_matches_extended_precision_oracle(self):
        import mpmath

        mpmath.mp.dps = 50
        p = [0.2, 0.3, 0.5]
        losses = [1.0, 0.5, 0.1]
        expected = [
            float(mpmath.log(mpmath.mpf(pi)) + mpmath.mpf("0.7") * mpmath.mpf(fi))
            for pi, fi in zip(p, losses)
        ]
        out = dual_step(np.array(p), np.array(losses), eta_b=0.7)
        assert np.allclose(out.values, expected, rtol=0, atol=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            dual_step(np.array([0.5, 0.5]), np.array([1.0]), eta_b=1.0)

    def test_zero_weight_rejected(self):
        with pytest.raises(DegenerateWeightsError):
            dual_step(np.array([0.0, 1.0]), np.zeros(2), eta_b=1.0)

    def test_floor_weights_restores_positivity(self):
        floored = floor_weights(np.array([0.0, 1.0]))
        assert floored.min() > 0
        assert floored.sum() == pytest.approx(1.0, abs=1e-15)
        dual_step(floored, np.zeros(2), eta_b=1.0)


class TestKernel:
    def test_equal_dual_weights_give_minus_rho(self):
        constraint = KlBallConstraint(rho=0.3, n_total=4)
        log_q = np.full(4, -1.3)
        for lam in (0.0, 0.7, 5.0):
            assert kernel_f(log_q, lam, constraint) == pytest.approx(-0.3, abs=1e-12)

    def test_huge_lambda_tempers_to_uniform(self):
        constraint = KlBallConstraint(rho=0.1, n_total=3)
        log_q = np.array([2.0, -1.0, 0.5])
        assert kernel_f(log_q, 1e9, constraint) == pytest.approx(-0.1, abs=1e-6)

    def test_matches_direct_residual_evaluation(self):
        # Independent path: explicit q, tempering, and KL computation.
        p = np.array([0.2, 0.3, 0.5])
        losses = np.array([1.0, 0.5, 0.1])
        q = p * np.exp(losses)
        tempered = np.sqrt(q) / np.sqrt(q).sum()  # lambda = 1
        expected = float(np.sum(tempered * np.log(3 * tempered))) - 0.05
        log_q = dual_step(p, losses, eta_b=1.0)
        got = kernel_f(log_q.values, 1.0, KlBallConstraint(rho=0.05, n_total=3))
        assert got == pytest.approx(expected, abs=1e-12)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            kernel_f(np.zeros(2), -0.5, KlBallConstraint(0.1, 2))

    def test_length_mismatch_with_constraint(self):
        with pytest.raises(DimensionMismatchError):
            kernel_f(np.zeros(3), 0.0, KlBallConstraint(0.1, 2))

    def test_huge_losses_do_not_overflow(self):
        log_q = dual_step(np.array([0.5, 0.5]), np.array([800.0, 0.0]), 1.0)
        value = kernel_f(log_q.values, 0.0, KlBallConstraint(0.5, 2))
        assert np.isfinite(value)

    @settings(max_examples=100, deadline=None)
    @given(
        log_q=st.lists(st.floats(-10.0, 10.0), min_size=2, max_size=6).map(np.array),
        lam1=st.floats(0.0, 50.0),
        gap=st.floats(1e-9, 50.0),
        rho=st.floats(0.0, 2.0),
    )
    def test_monotone_nonincreasing_in_lambda(self, log_q, lam1, gap, rho):
        constraint = KlBallConstraint(rho=rho, n_total=log_q.size)
        f1 = kernel_f(log_q, lam1, constraint)
        f2 = kernel_f(log_q, lam1 + gap, constraint)
        assert f1 >= f2 - 1e-10


def _sweep_lambda_oracle(log_q: np.ndarray, rho: float, step: float = 1e-5) -> float:
    """Locate the sign change of the KL residual on a dense lambda grid."""
    n = log_q.size
    a = log_q - log_q.max()
    grid = np.arange(0.0, 64.0 + step, step)
    for chunk_start in range(0, grid.size, 200_000):
        lams = grid[chunk_start : chunk_start + 200_000]
        t = 1.0 / (1.0 + lams)
        e = np.exp(t[:, None] * a[None, :])
        p = e / e.sum(axis=1, keepdims=True)
        residual = np.sum(p * np.log(n * p), axis=1) - rho
        below = np.flatnonzero(residual <= 0.0)
        if below.size:
            return float(lams[below[0]])
    raise AssertionError("oracle sweep found no sign change")


class TestSolveLambda:
    def test_equal_dual_weights_inactive(self):
        config = AllocatorConfig(eta_b=1.0, rho=1.0)
        assert solve_lambda(np.full(3, 0.2), KlBallConstraint(1.0, 3), config) == 0.0

    def test_tiny_step_inactive(self):
        p = np.array([0.26, 0.25, 0.25, 0.24])
        log_q = dual_step(p, np.array([1.0, 0.5, 0.2, 0.1]), eta_b=1e-6)
        config = AllocatorConfig(eta_b=1e-6, rho=0.5)
        assert solve_lambda(log_q.values, KlBallConstraint(0.5, 4), config) == 0.0

    def test_agrees_with_dense_sweep_on_inactive_instance(self):
        log_q = dual_step(np.array([0.2, 0.3, 0.5]), np.array([1.0, 0.5, 0.1]), 1.0)
        config = AllocatorConfig(eta_b=1.0, rho=0.05)
        got = solve_lambda(log_q.values, KlBallConstraint(0.05, 3), config)
        oracle = _sweep_lambda_oracle(log_q.values, 0.05)
        assert abs(got - oracle) <= 1e-4

    def test_agrees_with_dense_sweep_on_active_instance(self):
        log_q = dual_step(np.array([0.2, 0.3, 0.5]), np.array([3.0, 1.0, 0.2]), 1.0)
        config = AllocatorConfig(eta_b=1.0, rho=0.05)
        got = solve_lambda(log_q.values, KlBallConstraint(0.05, 3), config)
        assert got > 0.0
        oracle = _sweep_lambda_oracle(log_q.values, 0.05)
        assert abs(got - oracle) <= 1e-4

    def test_rho_zero_collapses_to_uniform(self):
        # The only feasible point at rho=0 is uniform; the multiplier search
        # runs out to a huge lambda and the projection lands there.
        log_q = np.array([0.0, 1.0])
        config = AllocatorConfig(eta_b=1.0, rho=0.0)
        lam = solve_lambda(log_q, KlBallConstraint(0.0, 2), config)
        out = project(log_q, lam)
        assert np.allclose(out.values, 0.5, atol=1e-6)
        assert kl_to_uniform(out.values) <= 1e-6

    def test_exhausted_bracketing_reports_failure(self):
        log_q = np.array([0.0, 20.0])
        config = AllocatorConfig(eta_b=1.0, rho=1e-6, max_bracket_doublings=2)
        with pytest.raises(BracketFailureError):
            solve_lambda(log_q, KlBallConstraint(1e-6, 2), config)


class TestProject:
    def test_equal_duals_give_uniform(self):
        for lam in (0.0, 1.0, 100.0):
            out = project(np.full(5, -2.0), lam)
            assert np.allclose(out.values, 0.2, atol=1e-15)

    def test_lambda_zero_is_plain_exponentiated_step(self):
        p = np.array([0.2, 0.3, 0.5])
        losses = np.array([1.0, 0.5, 0.1])
        log_q = dual_step(p, losses, eta_b=0.7)
        out = project(log_q.values, 0.0)
        expected = p * np.exp(0.7 * losses)
        expected /= expected.sum()
        assert np.allclose(out.values, expected, atol=1e-12)

    def test_huge_lambda_tempers_to_uniform(self):
        out = project(np.array([3.0, -4.0, 0.0]), 1e12)
        assert np.allclose(out.values, 1.0 / 3.0, atol=1e-6)


class TestUpdateWeights:
    def test_uniform_equal_losses_fixed_point(self):
        p = WeightVector.uniform(5)
        config = AllocatorConfig(eta_b=0.8, rho=1.0)
        out, lam = update_weights(p, np.full(5, 2.5), config)
        assert lam == 0.0
        assert np.array_equal(out.values, p.values)

    @settings(max_examples=60, deadline=None)
    @given(
        p=simplex_points(),
        shift=st.floats(-10.0, 10.0),
        eta_b=st.floats(0.1, 2.0),
        rho=st.floats(0.01, 1.5),
        data=st.data(),
    )
    def test_loss_shift_invariance(self, p, shift, eta_b, rho, data):
        losses = data.draw(loss_vectors_like(p.size))
        config = AllocatorConfig(eta_b=eta_b, rho=rho)
        out1, lam1 = update_weights(p, losses, config)
        out2, lam2 = update_weights(p, losses + shift, config)
        assert np.allclose(out1.values, out2.values, rtol=0, atol=1e-12)
        assert lam1 == pytest.approx(lam2, abs=1e-6)

    @settings(max_examples=80, deadline=None)
    @given(p=simplex_points(), eta_b=st.floats(0.1, 2.0), rho=st.floats(0.01, 1.5), data=st.data())
    def test_simplex_closure_and_feasibility(self, p, eta_b, rho, data):
        losses = data.draw(loss_vectors_like(p.size))
        config = AllocatorConfig(eta_b=eta_b, rho=rho)
        out, lam = update_weights(p, losses, config)
        assert np.all(out.values >= 0.0)
        assert out.values.sum() == pytest.approx(1.0, abs=1e-9)
        residual = kl_to_uniform(out.values) - rho
        assert residual <= 1e-6
        if lam > 1e-6:
            assert residual >= -1e-4

    @settings(max_examples=60, deadline=None)
    @given(
        base=st.floats(0.05, 0.4),
        f_low=st.floats(-3.0, 3.0),
        gap=st.floats(1e-6, 3.0),
        eta_b=st.floats(0.1, 2.0),
        rho=st.floats(0.01, 1.5),
    )
    def test_order_preservation_for_tied_weights(self, base, f_low, gap, eta_b, rho):
        p = np.array([base, base, 1.0 - 2.0 * base])
        losses = np.array([f_low + gap, f_low, 0.0])
        out, _ = update_weights(p, losses, AllocatorConfig(eta_b=eta_b, rho=rho))
        assert out.values[0] > out.values[1]

    def test_higher_loss_client_gains_weight(self):
        p = np.array([0.5, 0.5])
        out, _ = update_weights(p, np.array([1.0, 0.2]), AllocatorConfig(eta_b=0.5, rho=1.0))
        assert out.values[0] > 0.5 > out.values[1]
