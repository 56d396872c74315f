"""Tensor core: op semantics, error contracts, and gradient checks.

Every differentiable op's analytic gradient is compared against the
central-difference oracle in float64 at rel error < 1e-6, on random
inputs with dims in 3..8.
"""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from multibooth.optim import Adam
from multibooth.rng import Rng
from multibooth.tensor import (DimensionError, GraphError, Tensor, add,
                               assign_slice, concat, div, l2_norm, layer_norm,
                               matmul, mean, mul, neg, reshape, scale, silu,
                               slice_, softmax, sub, tile_rows, transpose, tsum)
from oracles import central_difference, rel_error, sum_of_squares

RNG = Rng(77).child("tensor-tests")
GRADCHECK_TOL = 1e-6


def rand(shape, stream, dtype=np.float64):
    return RNG.child(stream).normal(shape, dtype)


def gradcheck(build, arrays, stream="w"):
    """Compare library gradients of sum(build(*tensors) * W) to the oracle."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    w = RNG.child(f"gradcheck/{stream}").normal(out.shape, np.float64)

    loss = tsum(mul(out, Tensor(w)))
    loss.backward()

    def forward(*arrs):
        result = build(*[Tensor(a) for a in arrs])
        return float((result.data * w).sum())

    numeric = central_difference(forward, [a.copy() for a in arrays])
    for t, n in zip(tensors, numeric):
        assert t.grad is not None
        assert rel_error(t.grad, n) < GRADCHECK_TOL


# -- matmul -------------------------------------------------------------------


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        assert np.array_equal(matmul(eye, eye).data, np.eye(2, dtype=np.float32))

    def test_hand_computed(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[0.0], [1.0]])
        assert np.allclose(matmul(a, b).data, [[2.0], [4.0]])

    def test_one_by_one(self):
        out = matmul(Tensor([[3.0]]), Tensor([[4.0]]))
        assert out.item() == 12.0

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradcheck(self):
        gradcheck(matmul, [rand((4, 6), "mm-a"), rand((6, 3), "mm-b")], "mm")


# -- softmax ------------------------------------------------------------------


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax(Tensor([0.0, 0.0]), 0).data, [0.5, 0.5])

    def test_stability_under_large_inputs(self):
        out = softmax(Tensor([1000.0, 1000.0]), 0).data
        assert np.all(np.isfinite(out))
        assert np.allclose(out, [0.5, 0.5])

    def test_closed_form(self):
        out = softmax(Tensor([0.0, np.log(3.0)]), 0).data
        assert np.allclose(out, [0.25, 0.75], atol=1e-6)

    def test_empty_axis_errors(self):
        with pytest.raises(DimensionError, match="empty axis"):
            softmax(Tensor(np.zeros((0, 3))), 0)

    def test_bad_axis_errors(self):
        with pytest.raises(DimensionError, match="axis"):
            softmax(Tensor(np.zeros((2, 3))), 2)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
           st.floats(-30, 30))
    def test_rows_sum_to_one_and_shift_invariance(self, values, shift):
        x = np.array(values, dtype=np.float64)
        out = softmax(Tensor(x), 0).data
        assert abs(out.sum() - 1.0) < 1e-6
        assert np.all(out >= 0)
        shifted = softmax(Tensor(x + shift), 0).data
        assert np.abs(out - shifted).max() < 1e-6

    def test_gradcheck(self):
        gradcheck(lambda x: softmax(x, 1), [rand((3, 5), "sm")], "sm")


# -- l2 norm ------------------------------------------------------------------


class TestL2Norm:
    def test_pythagorean(self):
        assert l2_norm(Tensor([3.0, 4.0])).item() == pytest.approx(5.0)

    def test_zero_vector(self):
        assert l2_norm(Tensor(np.zeros(5))).item() == 0.0

    def test_matches_summation_oracle(self):
        v = rand((64,), "l2")
        expected = np.sqrt(sum_of_squares(v))
        assert l2_norm(Tensor(v)).item() == pytest.approx(expected, rel=1e-12)

    def test_gradcheck(self):
        gradcheck(l2_norm, [rand((7,), "l2-grad")], "l2")


# -- backward contracts ---------------------------------------------------------


class TestBackward:
    def test_linear_map_gradient(self):
        x = rand((6,), "lin-x")
        w = Tensor(rand((6,), "lin-w"), requires_grad=True)
        loss = tsum(mul(w, Tensor(x)))
        loss.backward()
        assert np.allclose(w.grad, x)

    def test_quadratic_gradient(self):
        v_data = rand((5,), "quad")
        v = Tensor(v_data, requires_grad=True)
        loss = tsum(mul(v, v))
        loss.backward()
        assert np.allclose(v.grad, 2.0 * v_data)

    def test_two_layer_net_matches_finite_differences(self):
        x = rand((3, 4), "net-x")
        w1 = rand((4, 5), "net-w1")
        w2 = rand((5, 2), "net-w2")
        target = rand((3, 2), "net-t")

        def net(w1_t, w2_t):
            h = silu(matmul(Tensor(x), w1_t))
            out = matmul(h, w2_t)
            diff = sub(out, Tensor(target))
            return tsum(mul(diff, diff))

        t1 = Tensor(w1.copy(), requires_grad=True)
        t2 = Tensor(w2.copy(), requires_grad=True)
        net(t1, t2).backward()

        def forward(a, b):
            return net(Tensor(a), Tensor(b)).item()

        numeric = central_difference(forward, [w1.copy(), w2.copy()])
        assert rel_error(t1.grad, numeric[0]) < GRADCHECK_TOL
        assert rel_error(t2.grad, numeric[1]) < GRADCHECK_TOL

    def test_non_scalar_loss_errors(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError, match="scalar"):
            mul(x, x).backward()

    def test_rerunning_backward_errors(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = tsum(mul(x, x))
        loss.backward()
        with pytest.raises(GraphError, match="already ran"):
            loss.backward()

    def test_leaf_without_graph_errors(self):
        with pytest.raises(GraphError, match="leaf"):
            Tensor(np.ones(1), requires_grad=True).backward()

    def test_frozen_leaf_never_accumulates(self):
        frozen = Tensor(rand((4,), "frozen"))
        live = Tensor(rand((4,), "live"), requires_grad=True)
        tsum(mul(frozen, live)).backward()
        assert frozen.grad is None
        assert live.grad is not None

    def test_grad_accumulates_across_graphs(self):
        x = Tensor(np.ones(3), requires_grad=True)
        tsum(mul(x, x)).backward()
        first = x.grad.copy()
        tsum(mul(x, x)).backward()
        assert np.allclose(x.grad, 2.0 * first)


# -- elementwise / structural ---------------------------------------------------


class TestElementwise:
    def test_same_shape_required(self):
        with pytest.raises(DimensionError, match="shapes"):
            add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_dtype_mismatch_rejected(self):
        with pytest.raises(DimensionError, match="dtype"):
            add(Tensor(np.zeros(2, dtype=np.float32)),
                Tensor(np.zeros(2, dtype=np.float64)))

    def test_scalar_broadcast_allowed(self):
        out = add(Tensor([[1.0, 2.0]]), Tensor(np.array(1.0, dtype=np.float32)))
        assert np.allclose(out.data, [[2.0, 3.0]])

    def test_python_scalar_operand(self):
        out = Tensor([2.0, 4.0]) * 0.5
        assert np.allclose(out.data, [1.0, 2.0])

    @pytest.mark.parametrize("op,stream", [
        (add, "add"), (sub, "sub"), (mul, "mul"), (div, "div"),
    ])
    def test_binary_gradcheck(self, op, stream):
        a = rand((4, 3), f"{stream}-a")
        b = rand((4, 3), f"{stream}-b")
        if op is div:
            b = b + 3.0 * np.sign(b)  # keep away from zero
        gradcheck(op, [a, b], stream)

    def test_scalar_operand_gradcheck(self):
        gradcheck(lambda a, s: mul(a, s),
                  [rand((5, 4), "scl-a"), rand((1,), "scl-s")], "scl")

    def test_scale_and_neg_gradcheck(self):
        gradcheck(lambda a: scale(a, -2.5), [rand((6,), "scale")], "scale")
        gradcheck(neg, [rand((3, 3), "neg")], "neg")

    def test_silu_gradcheck(self):
        gradcheck(silu, [rand((4, 5), "silu")], "silu")


class TestStructural:
    def test_reshape_transpose_roundtrip(self):
        x = rand((3, 8), "rt")
        out = transpose(reshape(Tensor(x), (8, 3)))
        assert out.shape == (3, 8)

    def test_reshape_gradcheck(self):
        gradcheck(lambda x: reshape(x, (2, 12)), [rand((4, 6), "resh")], "resh")

    def test_transpose_gradcheck(self):
        gradcheck(lambda x: transpose(x, (2, 0, 1)), [rand((3, 4, 5), "tr")], "tr")

    def test_concat_gradcheck(self):
        gradcheck(lambda a, b: concat([a, b], axis=1),
                  [rand((3, 4), "cat-a"), rand((3, 5), "cat-b")], "cat")

    def test_slice_gradcheck(self):
        gradcheck(lambda x: slice_(x, (slice(1, 5), slice(0, None, 2))),
                  [rand((6, 7), "slice")], "slice")

    def test_assign_slice_gradcheck(self):
        key = (slice(1, 3), slice(2, 5))
        gradcheck(lambda b, p: assign_slice(b, key, p),
                  [rand((5, 6), "as-base"), rand((2, 3), "as-patch")], "as")

    def test_assign_slice_shape_mismatch(self):
        with pytest.raises(DimensionError, match="patch shape"):
            assign_slice(Tensor(np.zeros((4, 4))), (slice(0, 2),),
                         Tensor(np.zeros((3, 4))))

    def test_int_indexing_rejected(self):
        with pytest.raises(DimensionError, match="slice objects"):
            slice_(Tensor(np.zeros((4, 4))), (0,))

    @given(st.integers(0, 3), st.integers(4, 7))
    def test_slice_then_assign_is_identity(self, start, stop):
        x = RNG.child(f"ident{start}{stop}").normal((8, 5), np.float64)
        key = (slice(start, stop),)
        base = Tensor(x)
        patch = slice_(base, key)
        restored = assign_slice(base, key, patch)
        assert np.array_equal(restored.data, x)

    def test_sum_mean_gradcheck(self):
        gradcheck(lambda x: tsum(x, axis=1), [rand((4, 5), "sum")], "sum")
        gradcheck(lambda x: mean(x, axis=0), [rand((5, 3), "mean")], "mean")
        gradcheck(lambda x: tsum(x), [rand((3, 4), "sum-all")], "sum-all")

    def test_layer_norm_gradcheck(self):
        gradcheck(layer_norm,
                  [rand((5, 6), "ln-x"), rand((6,), "ln-g"), rand((6,), "ln-b")],
                  "ln")

    def test_tile_rows_gradcheck(self):
        gradcheck(lambda v: tile_rows(v, 4), [rand((5,), "tile")], "tile")


# -- precision and determinism ---------------------------------------------------


class TestPrecisionAndDeterminism:
    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_float64_opt_in(self):
        assert Tensor([1.0], dtype=np.float64).dtype == np.float64

    def test_ops_preserve_dtype(self):
        x = Tensor(np.ones((2, 2), dtype=np.float64))
        assert matmul(x, x).dtype == np.float64
        assert softmax(x, 0).dtype == np.float64

    def test_same_seed_bit_identical(self):
        a = Rng(123).child("draw").normal((32, 8))
        b = Rng(123).child("draw").normal((32, 8))
        assert a.tobytes() == b.tobytes()


# -- Adam -----------------------------------------------------------------------


class TestAdam:
    def test_single_step_matches_hand_formula(self):
        p = Tensor(np.array([1.0, -2.0], dtype=np.float64), requires_grad=True)
        g = np.array([0.5, -1.5], dtype=np.float64)
        p.grad = g.copy()
        opt = Adam([p], lr=1e-2)
        opt.step()
        m = 0.1 * g
        v = 0.001 * g * g
        m_hat = m / (1 - 0.9)
        v_hat = v / (1 - 0.999)
        expected = np.array([1.0, -2.0]) - 1e-2 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert np.allclose(p.data, expected, atol=1e-12)

    def test_rejects_frozen_params(self):
        with pytest.raises(ValueError, match="frozen"):
            Adam([Tensor(np.ones(2))], lr=1e-3)

    def test_optimizer_step_is_the_only_mutation_path(self):
        p = Tensor(np.ones(3), requires_grad=True)
        before = p.data
        p.grad = np.ones(3, dtype=np.float32)
        Adam([p], lr=0.1).step()
        # reassignment, not in-place mutation: the old array is unchanged
        assert np.allclose(before, 1.0)
        assert not np.allclose(p.data, 1.0)
