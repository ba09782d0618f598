"""Tensor type, elementwise/reduction ops, and the reverse-mode tape."""

import numpy as np
import pytest

from uir_polykernel.tensor import (
    Scalar,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    absolute,
    add,
    clamp,
    div,
    finite_diff_grad,
    gelu,
    grad_rel_err,
    mul,
    narrow,
    neg,
    pixel_shuffle,
    power,
    reduce,
    reduce_max,
    reduce_mean,
    reduce_min,
    reduce_sum,
    sigmoid,
    sqrt,
    sub,
    where_mask,
)


def t(values, requires_grad=False):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


class TestElementwise:
    def test_add_definition(self):
        out = add(t([1.0, 2.0]), t([3.0, 4.0]))
        np.testing.assert_array_equal(out.data.ravel(), [4.0, 6.0])

    def test_mul_definition(self):
        out = mul(t([0.5, -2.0]), t([4.0, 0.25]))
        np.testing.assert_array_equal(out.data.ravel(), [2.0, -0.5])

    def test_mul_by_broadcast_one_is_identity(self):
        rng = np.random.default_rng(7)
        x = t(rng.standard_normal((2, 3, 4, 5)))
        out = mul(x, Scalar(1.0))
        np.testing.assert_array_equal(out.data, x.data)

    def test_sub_and_neg(self):
        np.testing.assert_array_equal(sub(t([3.0]), t([5.0])).data.ravel(), [-2.0])
        np.testing.assert_array_equal(neg(t([1.5, -2.0])).data.ravel(), [-1.5, 2.0])

    def test_scalar_broadcasts_anywhere(self):
        x = t(np.ones((2, 3, 2, 2)))
        out = add(x, Scalar(0.5))
        assert out.shape == (2, 3, 2, 2)
        assert np.all(out.data == 1.5)

    def test_size_one_dims_expand(self):
        a = t(np.arange(6.0).reshape(1, 3, 1, 2))
        b = t(np.ones((4, 3, 5, 2)))
        assert add(a, b).shape == (4, 3, 5, 2)

    def test_non_broadcastable_shapes_rejected(self):
        with pytest.raises(ShapeError) as err:
            add(t(np.ones((1, 2, 3, 3))), t(np.ones((1, 2, 3, 4))))
        # both shapes should be named in the message
        assert "3" in str(err.value) and "4" in str(err.value)

    def test_python_numbers_coerce(self):
        out = mul(t([2.0, 3.0]), 0.5)
        np.testing.assert_array_equal(out.data.ravel(), [1.0, 1.5])


class TestReductions:
    def test_mean_of_constant_is_constant(self):
        x = Tensor.full((2, 3, 4, 4), 0.37)
        assert reduce_mean(x).item() == pytest.approx(0.37)

    def test_sum_all_axes(self):
        x = t([[1.0, 2.0], [3.0, 4.0]])
        assert reduce_sum(x).item() == 10.0

    def test_mean_over_channel_axis(self):
        x = t(np.array([0.0, 3.0, 6.0]).reshape(1, 3, 1, 1))
        out = reduce_mean(x, axes=1)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 3.0

    def test_reduced_dims_become_size_one(self):
        x = t(np.arange(24.0).reshape(2, 3, 2, 2))
        assert reduce_sum(x, axes=(2, 3)).shape == (2, 3, 1, 1)

    def test_reduce_dispatch(self):
        x = t([[1.0, 2.0], [3.0, 4.0]])
        assert reduce(x, "sum").item() == 10.0
        assert reduce(x, "mean").item() == 2.5

    def test_invalid_axis_rejected(self):
        with pytest.raises(ShapeError):
            reduce_sum(t([1.0]), axes=4)
        with pytest.raises(ShapeError):
            reduce_mean(t([1.0]), axes=(1, 1))

    def test_reduce_max_min(self):
        x = t(np.array([[1.0, 7.0], [5.0, 3.0]]).reshape(1, 1, 2, 2))
        assert reduce_max(x, axis=3).data.ravel().tolist() == [7.0, 5.0]
        assert reduce_min(x, axis=2).data.ravel().tolist() == [1.0, 3.0]


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = t(np.random.default_rng(0).standard_normal((2, 1, 3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_square_gradient(self):
        x = t([3.0], requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(mul(x, x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad.ravel(), [6.0])

    def test_reuse_accumulates(self):
        x = t([1.0, 2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            y = add(x, x)
            loss = reduce_sum(y)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full_like(x.data, 2.0))

    def test_broadcast_gradient_reduces(self):
        # d/ds sum(x + s) = number of elements
        s = Scalar(0.5, requires_grad=True)
        x = t(np.zeros((2, 3, 2, 2)))
        with Tape() as tape:
            loss = reduce_sum(add(x, s))
        tape.backward(loss)
        assert s.grad.ravel()[0] == 24.0

    def test_backward_requires_scalar(self):
        x = t([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = mul(x, x)
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_backward_twice_rejected(self):
        x = t([1.0], requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(x)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_mean_gradient(self):
        x = t(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = reduce_mean(x)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, np.full_like(x.data, 0.25))

    def test_no_tape_records_nothing(self):
        x = t([1.0], requires_grad=True)
        y = mul(x, x)
        assert y.grad is None
        assert x.grad is None


class TestFiniteDiff:
    def test_sum_estimate_is_ones(self):
        x = t(np.random.default_rng(1).standard_normal((1, 2, 3, 3)))
        est = finite_diff_grad(lambda v: reduce_sum(v), x)
        np.testing.assert_allclose(est, np.ones_like(x.data), atol=1e-9)

    def test_square_estimate(self):
        x = t([1.0, 2.0])
        est = finite_diff_grad(lambda v: reduce_sum(mul(v, v)), x)
        np.testing.assert_allclose(est.ravel(), [2.0, 4.0], atol=1e-7)

    def test_against_backward_on_op_mix(self):
        """Seeded sweep over the nonlinear ops the network relies on."""
        cases = [
            ("sigmoid", lambda v: reduce_mean(sigmoid(v)), (-2.0, 2.0)),
            ("gelu", lambda v: reduce_mean(gelu(v)), (-2.0, 2.0)),
            ("sqrt", lambda v: reduce_mean(sqrt(v)), (0.5, 2.0)),
            ("power", lambda v: reduce_mean(power(v, 2.4)), (0.5, 1.5)),
            ("div", lambda v: reduce_mean(div(1.0, v)), (1.0, 2.0)),
            ("abs", lambda v: reduce_mean(absolute(v)), (0.2, 1.0)),
        ]
        for idx, (name, fn, (lo, hi)) in enumerate(cases):
            rng = np.random.default_rng(100 + idx)
            x = Tensor(rng.uniform(lo, hi, (1, 2, 4, 4)), requires_grad=True, dtype=np.float64)
            with Tape() as tape:
                loss = fn(x)
            tape.backward(loss)
            est = finite_diff_grad(fn, x)
            rel = grad_rel_err(x.grad, est)
            assert rel < 1e-6, f"{name}: rel err {rel:.3e}"


class TestStructuralOps:
    def test_narrow_values_and_grad(self):
        x = t(np.arange(12.0).reshape(1, 3, 2, 2), requires_grad=True)
        with Tape() as tape:
            piece = narrow(x, 1, 1, 1)
            loss = reduce_sum(piece)
        np.testing.assert_array_equal(piece.data, x.data[:, 1:2])
        tape.backward(loss)
        expect = np.zeros_like(x.data)
        expect[:, 1] = 1.0
        np.testing.assert_array_equal(x.grad, expect)

    def test_pixel_shuffle_rearrangement(self):
        # 4 channels collapse to 1 at twice the resolution; the channel
        # index walks the 2x2 sub-block in row-major order
        x = t(np.arange(4.0).reshape(1, 4, 1, 1))
        out = pixel_shuffle(x, 2)
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(out.data[0, 0], [[0.0, 1.0], [2.0, 3.0]])

    def test_pixel_shuffle_grad_is_permutation(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((2, 8, 3, 2)), requires_grad=True, dtype=np.float64)
        proj = rng.standard_normal((2, 2, 6, 4))
        fn = lambda v: reduce_sum(mul(pixel_shuffle(v, 2), Tensor(proj)))
        with Tape() as tape:
            loss = fn(x)
        tape.backward(loss)
        est = finite_diff_grad(fn, x)
        assert grad_rel_err(x.grad, est) < 1e-8

    def test_clamp_forward_and_dead_zone(self):
        x = t([-1.0, 0.5, 2.0], requires_grad=True)
        with Tape() as tape:
            y = clamp(x, 0.0, 1.0)
            loss = reduce_sum(y)
        np.testing.assert_array_equal(y.data.ravel(), [0.0, 0.5, 1.0])
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad.ravel(), [0.0, 1.0, 0.0])

    def test_where_mask_selects(self):
        mask = np.array([True, False]).reshape(1, 1, 1, 2)
        out = where_mask(mask, t([1.0, 1.0]), t([5.0, 5.0]))
        np.testing.assert_array_equal(out.data.ravel(), [1.0, 5.0])


class TestTensorType:
    def test_rank_promotion_and_size(self):
        x = t([1.0, 2.0, 3.0])
        assert x.shape == (1, 1, 1, 3)
        assert x.size == 3

    def test_scalar_is_rank_four(self):
        s = Scalar(2.5)
        assert s.shape == (1, 1, 1, 1)
        assert s.item() == 2.5

    def test_all_finite_flag(self):
        assert t([1.0, 2.0]).all_finite()
        assert not t([1.0, np.nan]).all_finite()

    def test_forward_determinism(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((2, 3, 5, 5))
        b = rng.standard_normal((2, 3, 5, 5))
        r1 = reduce_sum(mul(add(t(a), t(b)), t(b))).item()
        r2 = reduce_sum(mul(add(t(a), t(b)), t(b))).item()
        assert r1 == r2

    def test_detach_drops_grad_tracking(self):
        x = t([1.0], requires_grad=True)
        d = x.detach()
        assert not d.requires_grad
        np.testing.assert_array_equal(d.data, x.data)
