import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chiplab.errors import ContractViolation
from chiplab.kernels import (AdamHyper, AdamState, adam_step, matvec, nll_loss,
                             relu, softmax)


def f32(x):
    return np.asarray(x, dtype=np.float32)


class TestMatvec:
    def test_identity(self):
        m = np.eye(3, dtype=np.float32)
        assert np.array_equal(matvec(m, f32([1, 2, 3])), f32([1, 2, 3]))

    def test_zero_matrix(self):
        assert np.array_equal(matvec(np.zeros((2, 3), np.float32), f32([5, 5, 5])),
                              f32([0, 0]))

    def test_hand_computed(self):
        m = f32([[1, 2], [3, 4]])
        assert np.array_equal(matvec(m, f32([1, 1])), f32([3, 7]))

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            matvec(np.zeros((2, 3), np.float32), f32([1, 2]))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_linearity(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((4, 6)).astype(np.float32)
        u = rng.standard_normal(6).astype(np.float32)
        v = rng.standard_normal(6).astype(np.float32)
        a, b = np.float32(rng.uniform(-2, 2)), np.float32(rng.uniform(-2, 2))
        lhs = matvec(m, a * u + b * v)
        rhs = a * matvec(m, u) + b * matvec(m, v)
        assert np.allclose(lhs, rhs, atol=1e-4)


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax(f32([0, 0, 0, 0])), 0.25, atol=1e-7)

    def test_overflow_safe(self):
        out = softmax(f32([1000, 1000]))
        assert np.allclose(out, [0.5, 0.5], atol=1e-7)
        assert np.all(np.isfinite(out))

    def test_closed_form_ratio(self):
        out = softmax(f32([0.0, math.log(3.0)]))
        assert np.allclose(out, [0.25, 0.75], atol=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            softmax(np.zeros(0, np.float32))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=16),
           st.floats(-100, 100))
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one_and_shift_invariant(self, values, shift):
        v = f32(values)
        out = softmax(v)
        assert abs(float(out.sum()) - 1.0) < 1e-6
        assert np.all(out > 0) and np.all(out <= 1.0)
        shifted = softmax(v + np.float32(shift))
        assert np.allclose(out, shifted, atol=1e-6)


class TestRelu:
    def test_basic(self):
        assert np.array_equal(relu(f32([-1, 0, 2])), f32([0, 0, 2]))

    def test_all_negative(self):
        assert np.array_equal(relu(f32([-3, -0.1])), f32([0, 0]))

    def test_mixed(self):
        assert np.array_equal(relu(f32([0.5, -0.5])), f32([0.5, 0]))


class TestNllLoss:
    def test_uniform_equals_log_c(self):
        for c in (2, 4, 7):
            probs = np.full(c, 1.0 / c, dtype=np.float32)
            assert abs(nll_loss(probs, 0) - math.log(c)) < 1e-6

    def test_perfect_prediction_near_zero(self):
        loss = nll_loss(f32([0, 1, 0]), 1)
        assert 0.0 <= loss <= 1e-11

    def test_closed_form(self):
        assert abs(nll_loss(f32([0.25, 0.75]), 1) - (-math.log(0.75))) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(ContractViolation):
            nll_loss(f32([0.5, 0.5]), 2)
        with pytest.raises(ContractViolation):
            nll_loss(f32([0.5, 0.5]), -1)

    @given(st.lists(st.floats(0.001, 1.0), min_size=2, max_size=10), st.data())
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, raw, data):
        v = f32(raw)
        probs = v / v.sum()
        label = data.draw(st.integers(0, len(raw) - 1))
        assert nll_loss(probs, label) >= 0.0

    def test_exact_log_c_within_1e9(self):
        probs = np.full(4, 0.25, dtype=np.float32)
        assert abs(nll_loss(probs, 2) - math.log(4)) < 1e-9


class TestAdamStep:
    def test_zero_gradient_is_noop(self):
        p = f32([1.0, -2.0, 3.0])
        state = AdamState.zeros_like(p)
        before = p.copy()
        adam_step(p, np.zeros_like(p), state, AdamHyper(lr=0.1), t=1)
        assert np.array_equal(p, before)
        assert np.array_equal(state.m, np.zeros_like(p))

    def test_first_step_magnitude(self):
        p = f32([0.0])
        state = AdamState.zeros_like(p)
        adam_step(p, f32([1.0]), state, AdamHyper(lr=0.01), t=1)
        # bias-corrected first step is -lr * g / (|g| + eps)
        assert abs(float(p[0]) + 0.01) < 1e-6

    def test_constant_gradient_direction(self):
        p = f32([0.0, 0.0])
        g = f32([1.0, -1.0])
        state = AdamState.zeros_like(p)
        for t in range(1, 51):
            adam_step(p, g, state, AdamHyper(lr=0.01), t=t)
        assert p[0] < 0 and p[1] > 0

    def test_moments_decay_toward_zero(self):
        p = f32([1.0])
        state = AdamState(m=f32([0.5]), v=f32([0.5]))
        for t in range(1, 200):
            adam_step(p, f32([0.0]), state, AdamHyper(lr=0.01), t=t)
        assert abs(float(state.m[0])) < 1e-6

    def test_shape_mismatch(self):
        p = f32([1.0, 2.0])
        with pytest.raises(ContractViolation):
            adam_step(p, f32([1.0]), AdamState.zeros_like(p), AdamHyper(lr=0.1), t=1)

    def test_step_count_must_be_positive(self):
        p = f32([1.0])
        with pytest.raises(ContractViolation):
            adam_step(p, f32([1.0]), AdamState.zeros_like(p), AdamHyper(lr=0.1), t=0)
