"""Tensor/tape primitives: hand-computed values, finite-difference oracles,
and the gradient-accumulation invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phaseflow.tensor import (
    EvaluationError,
    RankError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    clamp,
    concat,
    embedding,
    exp,
    grad_check,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mul,
    record_op,
    silu,
    softmax,
    softplus,
    square,
    stack,
    tmean,
    tsum,
)


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, b).data, b.data)

    def test_hand_computed(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a, b = rand(rng, 4, 5), rand(rng, 5, 3)
        err = grad_check(lambda: tsum(square(matmul(a, b))), [a, b], step=1e-5)
        assert err < 1e-6

    def test_batched_gradient(self):
        rng = np.random.default_rng(1)
        a, b = rand(rng, 3, 4, 5), rand(rng, 3, 5, 2)
        err = grad_check(lambda: tsum(square(matmul(a, b))), [a, b], step=1e-5)
        assert err < 1e-6


class TestLayerNorm:
    def test_constant_input_maps_to_bias(self):
        out = layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor([1.0] * 3), Tensor([0.0] * 3))
        assert np.allclose(out.data, 0.0)

    def test_already_normalized_is_fixed_point(self):
        out = layer_norm(Tensor([-1.0, 1.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]),
                         eps=1e-12)
        assert np.allclose(out.data, [-1.0, 1.0], atol=1e-6)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x, g, b = rand(rng, 3, 7), rand(rng, 7), rand(rng, 7)
        err = grad_check(lambda: tsum(square(layer_norm(x, g, b))), [x, g, b])
        assert err < 1e-6

    def test_empty_axis_rejected(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_logit_stability(self):
        out = softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert abs(out[0] - 1.0) < 1e-12 and out[1] < 1e-12

    def test_log_ratio(self):
        out = softmax(Tensor([np.log(1.0), np.log(3.0)])).data
        assert np.allclose(out, [0.25, 0.75], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=-1e3, max_value=1e3), min_size=1, max_size=8))
    def test_rows_sum_to_one(self, vals):
        out = softmax(Tensor(np.array(vals))).data
        assert abs(out.sum() - 1.0) < 1e-6
        assert np.all(out >= 0)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x = rand(rng, 4, 6)
        t = rng.standard_normal((4, 6))
        err = grad_check(lambda: tsum(square(softmax(x) - Tensor(t))), [x])
        assert err < 1e-6


class TestElementwise:
    def test_silu_at_zero(self):
        assert silu(Tensor(np.array(0.0))).item() == 0.0

    def test_softplus_closed_form(self):
        assert abs(softplus(Tensor(np.array(0.0))).item() - np.log(2.0)) < 1e-12

    def test_softplus_large_input_no_overflow(self):
        assert abs(softplus(Tensor(np.array(50.0))).item() - 50.0) < 1e-9

    def test_clamp_contract(self):
        x = Tensor([-9.0, 0.5, 9.0], requires_grad=True)
        with Tape() as tape:
            out = clamp(x, -5.0, 2.0)
            assert out.data.tolist() == [-5.0, 0.5, 2.0]
            tape.backward(tsum(out), [x])
        assert x.grad.tolist() == [0.0, 1.0, 0.0]

    def test_elementwise_gradients(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.uniform(-1.0, 1.0, size=11), requires_grad=True)
        for fn in (exp, silu, softplus, lambda t: log(square(t) + 1.0)):
            err = grad_check(lambda fn=fn: tsum(square(fn(x))), [x])
            assert err < 1e-6


class TestBackward:
    def test_quadratic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = tsum(mul(x, x))
            grads = tape.backward(loss, [x])
        assert grads[x].tolist() == [2.0, 4.0]

    def test_constant_loss_gives_zero_grads(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = tsum(square(Tensor([3.0])))
            grads = tape.backward(loss, [x])
        assert grads[x].tolist() == [0.0, 0.0]

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            with pytest.raises(RankError):
                tape.backward(mul(x, x), [x])

    def test_grad_accumulates_across_consumers(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = tsum(mul(x, x) + mul(x, Tensor([5.0])))
            grads = tape.backward(loss, [x])
        assert grads[x].tolist() == [11.0]

    def test_backward_is_linear_in_the_loss(self):
        # exact at f64 when accumulation order matches: build g's expression
        # first so the combined reverse pass visits f's contributions first,
        # and let g touch each leaf at most once
        rng = np.random.default_rng(5)
        x = rand(rng, 6)
        y = rand(rng, 6)
        c = Tensor(rng.standard_normal(6))

        def run(f):
            with Tape() as tape:
                return {p: g.copy() for p, g in tape.backward(f(), [x, y]).items()}

        f = lambda: tsum(square(x) + mul(x, y))
        g = lambda: tsum(mul(x, c))

        def fg():
            g_loss = g()
            return g_loss + f()

        gf, gg, gfg = run(f), run(g), run(fg)
        for p in (x, y):
            assert np.array_equal(gf[p] + gg[p], gfg[p])

    def test_broadcast_bias_gradient(self):
        rng = np.random.default_rng(6)
        x, b = rand(rng, 4, 3), rand(rng, 3)
        err = grad_check(lambda: tsum(square(add(x, b))), [x, b])
        assert err < 1e-6


class TestGradCheck:
    def test_linear_function_is_exact(self):
        rng = np.random.default_rng(7)
        x = rand(rng, 5)
        c = Tensor(rng.standard_normal(5))
        assert grad_check(lambda: tsum(mul(x, c)), [x]) < 1e-10

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(8)
        logits = rand(rng, 4, 9)
        onehot = np.zeros((4, 9))
        onehot[np.arange(4), rng.integers(0, 9, 4)] = 1.0
        target = Tensor(onehot)

        def f():
            return -tsum(mul(log_softmax(logits), target)) / 4.0

        assert grad_check(f, [logits]) < 1e-6

    def test_broken_gradient_is_caught(self):
        # negative control: a primitive whose vjp is deliberately wrong
        rng = np.random.default_rng(9)
        x = rand(rng, 5)

        def bad_square(t):
            return record_op(t.data * t.data, (t,), lambda g: (g * t.data,))

        assert grad_check(lambda: tsum(bad_square(x)), [x]) > 1e-2

    def test_nonfinite_loss_raises(self):
        x = Tensor([1.0], requires_grad=True)
        with np.errstate(invalid="ignore"):
            with pytest.raises(EvaluationError):
                grad_check(lambda: tsum(log(x - 2.0)), [x])


class TestShapesAndIndexing:
    def test_concat_and_slice_roundtrip_gradient(self):
        rng = np.random.default_rng(10)
        a, b = rand(rng, 2, 3), rand(rng, 2, 4)
        err = grad_check(lambda: tsum(square(concat([a, b], axis=1)[:, 1:6])), [a, b])
        assert err < 1e-6

    def test_stack_gradient(self):
        rng = np.random.default_rng(11)
        a, b = rand(rng, 3), rand(rng, 3)
        err = grad_check(lambda: tsum(square(stack([a, b], axis=0))), [a, b])
        assert err < 1e-6

    def test_embedding_scatter(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        idx = np.array([1, 1, 3])
        with Tape() as tape:
            out = embedding(table, idx)
            grads = tape.backward(tsum(out), [table])
        expected = np.zeros((4, 3))
        expected[1] = 2.0
        expected[3] = 1.0
        assert np.array_equal(grads[table], expected)

    def test_linear_helper_matches_matmul(self):
        rng = np.random.default_rng(12)
        x, w, b = rand(rng, 2, 5, 4), rand(rng, 4, 3), rand(rng, 3)
        out = linear(x, w, b)
        ref = x.data.reshape(-1, 4) @ w.data + b.data
        assert np.allclose(out.data, ref.reshape(2, 5, 3))
        assert grad_check(lambda: tsum(square(linear(x, w, b))), [x, w, b]) < 1e-6

    def test_mean_gradient(self):
        rng = np.random.default_rng(13)
        x = rand(rng, 3, 4)
        err = grad_check(lambda: square(tmean(mul(x, x))), [x])
        assert err < 1e-6
