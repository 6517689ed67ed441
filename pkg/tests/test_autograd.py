from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcpcn import autograd as ag
from dcpcn.autograd import GradientTape, Tensor
from dcpcn.errors import ShapeError


def param(shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def check(f, params, tol=1e-6):
    result = ag.finite_diff_check(f, params)
    assert result.passed(tol), result
    return result


def test_add_mul_broadcast_gradients():
    a, b = param((3, 4), 1), param((4,), 2)
    check(lambda: ag.sum_over((a + b) * (a - b) / (b * b + 1.0)), [a, b])


def test_matmul_batched_and_2d():
    x, w = param((2, 5, 3), 1), param((3, 4), 2)
    check(lambda: ag.sum_over(ag.tanh(x @ w)), [x, w])
    y = param((2, 4, 6), 3)
    check(lambda: ag.mean(ag.matmul(ag.tanh(x @ w), y)), [x, w, y])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_softmax_layer_norm_attention():
    x, g, b = param((2, 3, 8), 1), param((8,), 2), param((8,), 3)
    check(lambda: ag.sum_over(ag.softmax(ag.layer_norm(x, g, b)) * ag.layer_norm(x, g, b)), [x, g, b])
    q, k, v = param((2, 3, 4), 4), param((2, 5, 4), 5), param((2, 5, 6), 6)
    weights = np.random.default_rng(0).normal(size=(2, 3, 6))
    check(lambda: ag.sum_over(ag.scaled_dot_attention(q, k, v) * Tensor(weights)), [q, k, v])


def test_attention_on_empty_memory_raises():
    with pytest.raises(ShapeError):
        ag.scaled_dot_attention(Tensor(np.ones((2, 4))), Tensor(np.ones((0, 4))), Tensor(np.ones((0, 4))))


def test_relu_max_and_norm():
    x = param((4, 6), 7)
    check(lambda: ag.sum_over(ag.relu(x) * ag.relu(x)) + ag.sum_over(ag.max_over(x, axis=1)), [x])
    check(lambda: ag.sum_over(ag.l2_norm(x, axis=-1)), [x])


def test_l2_norm_zero_row_has_zero_gradient():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    with GradientTape() as tape:
        loss = ag.sum_over(ag.l2_norm(x))
    ag.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, 0.0)


def test_structure_ops():
    a, b = param((2, 3), 1), param((2, 2), 2)
    idx = np.array([0, 2, 2, 1])
    check(
        lambda: ag.sum_over(
            ag.take(ag.concat([a, b], axis=1), idx, axis=1).reshape(8) * Tensor(np.arange(8.0))
        )
        + ag.sum_over(ag.stack([a, a * 2], axis=0).transpose((2, 1, 0)) * Tensor(np.ones((3, 2, 2)))),
        [a, b],
    )


def test_take_accumulates_repeated_indices():
    x = Tensor(np.arange(3.0), requires_grad=True)
    with GradientTape() as tape:
        loss = ag.sum_over(ag.take(x, [1, 1, 1, 2]))
    ag.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [0.0, 3.0, 1.0])


def test_straight_through_forward_and_backward():
    f, code = param((5, 4), 1), param((5, 4), 2)
    with GradientTape() as tape:
        out = ag.straight_through(f, code)
        loss = ag.sum_over(out)
    assert np.array_equal(out.data, code.data)
    ag.backward(tape, loss)
    np.testing.assert_array_equal(f.grad, np.ones((5, 4)))
    assert code.grad is None


def test_straight_through_matches_surrogate_finite_differences():
    f, code = param((3, 4), 1), param((3, 4), 2)
    w = Tensor(np.random.default_rng(3).normal(size=(4, 2)))
    check(lambda: ag.sum_over(ag.tanh(ag.straight_through(f, code) @ w)), {"f": f})


def test_stop_gradient_blocks_and_is_frozen_under_check():
    x = param((4,), 1)
    with GradientTape() as tape:
        loss = ag.sum_over(x * ag.stop_gradient(x))
    ag.backward(tape, loss)
    np.testing.assert_allclose(x.grad, x.data)
    check(lambda: ag.sum_over(x * ag.stop_gradient(x)), [x])


def test_backward_rejects_non_scalar_and_foreign_loss():
    x = param((3,), 1)
    with GradientTape() as tape:
        y = x * 2
    with pytest.raises(ValueError, match="scalar"):
        ag.backward(tape, y)
    with GradientTape():
        z = ag.sum_over(x)
    with pytest.raises(ValueError, match="not recorded"):
        ag.backward(tape, z)


def test_no_recording_without_tape_or_grad():
    x = param((3,), 1)
    with GradientTape() as tape:
        ag.sum_over(Tensor(np.ones(3)) * 2)
    assert len(tape) == 0
    ag.sum_over(x * 2)  # outside any tape: fine, nothing recorded


def test_kink_crossings_are_skipped_not_failed():
    x = Tensor(np.array([1e-7, 1.0]), requires_grad=True)
    result = ag.finite_diff_check(lambda: ag.sum_over(ag.relu(x)), [x], eps=1e-5)
    assert result.skipped == [("p0", 0)]
    assert result.passed(1e-8)


def test_gradcheck_detects_a_wrong_gradient():
    x = param((3,), 1)

    def bad_square(t: Tensor) -> Tensor:
        return ag._make(t.data**2, (t,), lambda g: (g * t.data,), "bad")  # missing factor 2

    assert not ag.finite_diff_check(lambda: ag.sum_over(bad_square(x)), [x]).passed(1e-3)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=st.floats(-3, 3)))
def test_mean_sum_gradients_property(a):
    x = Tensor(a, requires_grad=True)
    with GradientTape() as tape:
        loss = ag.mean(x) + ag.sum_over(x * x)
    ag.backward(tape, loss)
    np.testing.assert_allclose(x.grad, 1.0 / a.size + 2 * a, rtol=1e-12, atol=1e-12)
