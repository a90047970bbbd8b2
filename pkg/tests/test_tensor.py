"""Autodiff engine: op semantics, gradient correctness, tape contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpp import tensor as T
from tpp.errors import ArgumentError, ShapeError, StateError

from conftest import finite_difference, rel_err, run_forward_loss


def _rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestElementwise:
    def test_add_zeros_is_identity(self):
        x = T.Tensor(_rand((3, 4)))
        out = T.add(x, T.zeros_like(x))
        assert np.array_equal(out.data, x.data)

    def test_broadcasting_follows_trailing_rules(self):
        a = T.Tensor(_rand((2, 3, 4)))
        b = T.Tensor(_rand((4,)))
        assert T.add(a, b).shape == (2, 3, 4)
        assert T.mul(a, T.Tensor(_rand((3, 1)))).shape == (2, 3, 4)

    def test_non_broadcastable_shapes_raise_with_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            T.add(T.Tensor(_rand((2, 3))), T.Tensor(_rand((4,))))
        assert "[2, 3]" in str(exc.value) and "[4]" in str(exc.value)

    def test_division_by_zero_propagates_infinity(self):
        out = T.div(T.Tensor([1.0, -1.0]), T.Tensor([0.0, 0.0]))
        assert out.data[0] == np.inf and out.data[1] == -np.inf

    def test_scale(self):
        x = T.Tensor(_rand((5,)))
        assert np.array_equal(T.scale(x, 2.0).data, x.data * 2.0)

    def test_gelu_at_zero(self):
        assert T.gelu(T.Tensor([0.0])).data[0] == 0.0

    def test_gelu_matches_gaussian_cdf_form(self):
        from scipy.special import erf
        x = _rand((50,), seed=3)
        expected = 0.5 * x * (1 + erf(x / np.sqrt(2)))
        assert np.allclose(T.gelu(T.Tensor(x)).data, expected, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("op,builder", [
        ("add", lambda a, b: T.add(a, b)),
        ("sub", lambda a, b: T.sub(a, b)),
        ("mul", lambda a, b: T.mul(a, b)),
        ("div", lambda a, b: T.div(a, b)),
    ])
    def test_binary_op_gradients_match_finite_differences(self, op, builder):
        rng = np.random.default_rng(hash(op) % 2**32)
        a = T.Tensor(rng.standard_normal((5, 10)), requires_grad=True)
        b = T.Tensor(rng.standard_normal((5, 10)) + 3.0, requires_grad=True)
        weights = rng.standard_normal((5, 10))

        def loss():
            return T.mul(builder(a, b), T.Tensor(weights)).sum()

        T.backward(loss())
        for t in (a, b):
            fd = finite_difference(lambda: run_forward_loss(loss), t.data)
            assert rel_err(t.grad, fd) < 1e-5

    def test_gelu_gradient_at_50_random_points(self):
        x = T.Tensor(_rand((50,), seed=7), requires_grad=True)
        weights = _rand((50,), seed=8)

        def loss():
            return T.mul(T.gelu(x), T.Tensor(weights)).sum()

        T.backward(loss())
        fd = finite_difference(lambda: run_forward_loss(loss), x.data)
        assert rel_err(x.grad, fd) < 1e-6


class TestMatmul:
    def test_identity(self):
        eye = T.Tensor([[1.0, 0.0], [0.0, 1.0]])
        m = T.Tensor([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(T.matmul(eye, m).data, m.data)

    def test_hand_checked_inner_product(self):
        out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_sum_gradient_equals_ones_matmul_b_transpose(self):
        a = T.Tensor(_rand((4, 5), seed=1), requires_grad=True)
        b = T.Tensor(_rand((5, 3), seed=2), requires_grad=True)
        T.backward(T.matmul(a, b).sum())
        assert np.allclose(a.grad, np.ones((4, 3)) @ b.data.T, atol=1e-12)
        # and the independent oracle agrees
        def loss():
            return T.matmul(a, b).sum()
        fd = finite_difference(lambda: run_forward_loss(loss), a.data)
        assert rel_err(a.grad, fd) < 1e-6

    def test_batched_gradients_match_finite_differences(self):
        a = T.Tensor(_rand((2, 3, 4), seed=3), requires_grad=True)
        b = T.Tensor(_rand((4, 5), seed=4), requires_grad=True)
        weights = _rand((2, 3, 5), seed=5)

        def loss():
            return T.mul(T.matmul(a, b), T.Tensor(weights)).sum()

        T.backward(loss())
        for t in (a, b):
            fd = finite_difference(lambda: run_forward_loss(loss), t.data)
            assert rel_err(t.grad, fd) < 1e-5

    def test_inner_dimension_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            T.matmul(T.Tensor(_rand((2, 3))), T.Tensor(_rand((4, 2))))
        assert "[2, 3]" in str(exc.value) and "[4, 2]" in str(exc.value)


class TestShapeOps:
    @pytest.mark.parametrize("op,args,shape", [
        ("transpose", ((1, 0, 2),), (3, 2, 4)),
        ("reshape", ((6, 4),), (6, 4)),
    ])
    def test_gradients(self, op, args, shape):
        x = T.Tensor(_rand((2, 3, 4), seed=6), requires_grad=True)
        weights = _rand(shape, seed=7)

        def loss():
            y = getattr(T, op)(x, *args)
            return T.mul(y, T.Tensor(weights)).sum()

        T.backward(loss())
        fd = finite_difference(lambda: run_forward_loss(loss), x.data)
        assert rel_err(x.grad, fd) < 1e-5

    def test_concat_narrow_roundtrip_and_grads(self):
        a = T.Tensor(_rand((2, 3), seed=8), requires_grad=True)
        b = T.Tensor(_rand((2, 2), seed=9), requires_grad=True)
        cat = T.concat([a, b], axis=1)
        assert np.array_equal(T.narrow(cat, 1, 0, 3).data, a.data)
        assert np.array_equal(T.narrow(cat, 1, 3, 2).data, b.data)
        weights = _rand((2, 2), seed=10)

        def loss():
            return T.mul(T.narrow(T.concat([a, b], axis=1), 1, 2, 2), T.Tensor(weights)).sum()

        T.backward(loss())
        for t in (a, b):
            fd = finite_difference(lambda: run_forward_loss(loss), t.data)
            assert rel_err(t.grad, fd, floor=1e-6) < 1e-5

    def test_gather_scatter_gradients(self):
        x = T.Tensor(_rand((2, 5, 3), seed=11), requires_grad=True)
        fill = T.Tensor(_rand((3,), seed=12), requires_grad=True)
        idx = np.array([[0, 2, 4], [1, 2, 3]])
        weights = _rand((2, 5, 3), seed=13)

        def loss():
            picked = T.take_tokens(x, idx)
            full = T.scatter_tokens(picked, idx, fill, 5)
            return T.mul(full, T.Tensor(weights)).sum()

        T.backward(loss())
        for t in (x, fill):
            fd = finite_difference(lambda: run_forward_loss(loss), t.data)
            assert rel_err(t.grad, fd, floor=1e-6) < 1e-5

    def test_index_rows_gradient(self):
        x = T.Tensor(_rand((6, 3), seed=14), requires_grad=True)
        idx = np.array([[0, 0, 5], [2, 3, 3]])
        weights = _rand((2, 3, 3), seed=15)

        def loss():
            return T.mul(T.index_rows(x, idx), T.Tensor(weights)).sum()

        T.backward(loss())
        fd = finite_difference(lambda: run_forward_loss(loss), x.data)
        assert rel_err(x.grad, fd, floor=1e-6) < 1e-5


class TestLayerNorm:
    def test_constant_row_normalizes_to_zero(self):
        x = T.Tensor([[5.0, 5.0, 5.0]])
        out = T.layer_norm(x, T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), eps=1e-5)
        assert np.allclose(out.data, 0.0, atol=1e-9)

    def test_unit_gamma_rows_have_zero_mean_unit_variance(self):
        x = T.Tensor(_rand((6, 16), seed=16))
        out = T.layer_norm(x, T.Tensor(np.ones(16)), T.Tensor(np.zeros(16)), eps=1e-12)
        assert np.max(np.abs(out.data.mean(axis=-1))) < 1e-10
        assert np.allclose(out.data.var(axis=-1), 1.0, atol=1e-6)

    def test_gradients_match_finite_differences(self):
        x = T.Tensor(_rand((3, 8), seed=17), requires_grad=True)
        gamma = T.Tensor(_rand((8,), seed=18), requires_grad=True)
        beta = T.Tensor(_rand((8,), seed=19), requires_grad=True)
        weights = _rand((3, 8), seed=20)

        def loss():
            return T.mul(T.layer_norm(x, gamma, beta, 1e-5), T.Tensor(weights)).sum()

        T.backward(loss())
        for t in (x, gamma, beta):
            fd = finite_difference(lambda: run_forward_loss(loss), t.data)
            assert rel_err(t.grad, fd, floor=1e-6) < 1e-5

    def test_eps_must_be_positive(self):
        x = T.Tensor(_rand((2, 4)))
        with pytest.raises(ArgumentError):
            T.layer_norm(x, T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)), eps=0.0)


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        out = T.softmax(T.Tensor([0.0, 0.0, 0.0]), 1.0)
        assert np.allclose(out.data, 1.0 / 3.0, atol=1e-15)

    def test_small_temperature_sharpens_to_argmax(self):
        out = T.softmax(T.Tensor([10.0, 0.0]), 0.01)
        assert out.data[0] > 1 - 1e-12 and out.data[1] < 1e-12

    def test_rows_sum_to_one(self):
        out = T.softmax(T.Tensor(_rand((3, 7), seed=21) * 10), 1.0)
        assert np.max(np.abs(out.data.sum(axis=-1) - 1.0)) <= 1e-12

    def test_temperature_must_be_positive(self):
        with pytest.raises(ArgumentError):
            T.softmax(T.Tensor([1.0]), 0.0)

    def test_gradient_matches_finite_differences(self):
        x = T.Tensor(_rand((4, 6), seed=22), requires_grad=True)
        weights = _rand((4, 6), seed=23)

        def loss():
            return T.mul(T.softmax(x, 0.7), T.Tensor(weights)).sum()

        T.backward(loss())
        fd = finite_difference(lambda: run_forward_loss(loss), x.data)
        assert rel_err(x.grad, fd, floor=1e-6) < 1e-5

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 9),
           st.floats(0.05, 5.0, allow_nan=False))
    def test_property_rows_always_sum_to_one(self, rows, cols, temp):
        x = np.random.default_rng(rows * 100 + cols).standard_normal((rows, cols)) * 8
        out = T.softmax(T.Tensor(x), temp)
        assert np.max(np.abs(out.data.sum(axis=-1) - 1.0)) <= 1e-12


class TestLosses:
    def test_mse_masked_zero_when_predictions_match_on_mask(self):
        pred = _rand((2, 4, 3), seed=24)
        target = pred.copy()
        target[:, 0] += 100.0  # corrupt an unmasked position
        mask = np.zeros((2, 4), dtype=bool)
        mask[:, 2:] = True
        out = T.mse_masked(T.Tensor(pred), T.Tensor(target), mask)
        assert out.data == 0.0

    def test_mse_masked_ignores_visible_positions(self):
        rng = np.random.default_rng(25)
        pred = T.Tensor(rng.standard_normal((2, 4, 3)))
        target = rng.standard_normal((2, 4, 3))
        mask = np.array([[True, False, True, False], [False, True, False, True]])
        base = T.mse_masked(pred, T.Tensor(target), mask).data.copy()
        mutated = target.copy()
        mutated[~mask] += rng.standard_normal(((~mask).sum(), 3)) * 10
        again = T.mse_masked(pred, T.Tensor(mutated), mask).data
        assert again == base  # bit-identical

    def test_mse_masked_empty_mask_is_an_error(self):
        with pytest.raises(ArgumentError):
            T.mse_masked(T.Tensor(_rand((1, 2, 3))), T.Tensor(_rand((1, 2, 3))),
                         np.zeros((1, 2), dtype=bool))

    def test_mse_masked_gradient(self):
        pred = T.Tensor(_rand((2, 4, 3), seed=26), requires_grad=True)
        target = T.Tensor(_rand((2, 4, 3), seed=27))
        mask = np.array([[True, False, True, False], [False, True, True, True]])

        def loss():
            return T.mse_masked(pred, target, mask)

        T.backward(loss())
        fd = finite_difference(lambda: run_forward_loss(loss), pred.data)
        assert rel_err(pred.grad, fd, floor=1e-6) < 1e-5

    def test_cross_entropy_gradient(self):
        logits = T.Tensor(_rand((5, 4), seed=28), requires_grad=True)
        labels = np.array([0, 3, 1, 1, 2])

        def loss():
            return T.cross_entropy(logits, labels)

        T.backward(loss())
        fd = finite_difference(lambda: run_forward_loss(loss), logits.data)
        assert rel_err(logits.grad, fd, floor=1e-6) < 1e-5

    def test_soft_cross_entropy_of_uniform_with_itself_is_ln2(self):
        p = np.array([[0.5, 0.5]])
        logits = T.Tensor(np.zeros((1, 2)))
        out = T.soft_cross_entropy(p, logits, temperature=1.0)
        assert abs(out.data - np.log(2.0)) < 1e-12

    def test_soft_cross_entropy_gradient(self):
        rng = np.random.default_rng(29)
        raw = rng.random((4, 6))
        teacher = raw / raw.sum(axis=-1, keepdims=True)
        student = T.Tensor(rng.standard_normal((4, 6)), requires_grad=True)

        def loss():
            return T.soft_cross_entropy(teacher, student, temperature=0.3)

        T.backward(loss())
        fd = finite_difference(lambda: run_forward_loss(loss), student.data)
        assert rel_err(student.grad, fd, floor=1e-6) < 1e-5

    def test_dice_loss_identical_masks_near_zero(self):
        m = (np.random.default_rng(30).random((6, 6)) > 0.5).astype(np.float64)
        out = T.dice_loss(T.Tensor(m), T.Tensor(m), smooth=1e-5)
        assert out.data < 1e-6

    def test_dice_loss_gradient(self):
        probs = T.Tensor(np.random.default_rng(31).random((5, 5)), requires_grad=True)
        target = T.Tensor((np.random.default_rng(32).random((5, 5)) > 0.5).astype(np.float64))

        def loss():
            return T.dice_loss(probs, target, smooth=1e-3)

        T.backward(loss())
        fd = finite_difference(lambda: run_forward_loss(loss), probs.data)
        assert rel_err(probs.grad, fd, floor=1e-6) < 1e-5


class TestBackwardContract:
    def test_linear_loss_gradient_is_the_fixed_input(self):
        x = np.array([1.0, -2.0, 3.0])
        w = T.Tensor(np.zeros(3), requires_grad=True)
        T.backward(T.mul(w, T.Tensor(x)).sum())
        assert np.array_equal(w.grad, x)

    def test_grads_accumulate_across_backward_calls(self):
        w = T.Tensor(np.ones(3), requires_grad=True)
        loss = T.mul(w, T.Tensor([1.0, 2.0, 3.0])).sum()
        T.backward(loss)
        first = w.grad.copy()
        T.backward(loss)
        assert np.array_equal(w.grad, 2 * first)

    def test_non_scalar_loss_rejected(self):
        w = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ArgumentError):
            T.backward(T.mul(w, w))

    def test_untaped_loss_rejected(self):
        with pytest.raises(StateError):
            T.backward(T.Tensor(1.0, requires_grad=True))

    def test_cleared_tape_cannot_backprop(self):
        w = T.Tensor(np.ones(3), requires_grad=True)
        loss = T.mul(w, w).sum()
        T.clear_tape()
        with pytest.raises(StateError):
            T.backward(loss)

    def test_no_gradient_leakage_to_frozen_tensors(self):
        frozen = T.Tensor(_rand((4, 4), seed=33), requires_grad=False)
        live = T.Tensor(_rand((4, 4), seed=34), requires_grad=True)
        T.backward(T.matmul(frozen, live).sum())
        assert frozen.grad is None
        assert live.grad is not None

    def test_frozen_only_subgraphs_stay_off_the_tape(self):
        a = T.Tensor(_rand((3, 3)))
        b = T.Tensor(_rand((3, 3)))
        before = len(T.tape())
        out = T.matmul(a, b)
        assert len(T.tape()) == before
        assert out.node is None and not out.requires_grad

    def test_no_grad_context_records_nothing(self):
        w = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            out = T.mul(w, w).sum()
        assert out.node is None

    def test_determinism_same_ops_same_bits(self):
        def run():
            x = T.Tensor(_rand((8, 8), seed=35), requires_grad=True)
            y = T.softmax(T.matmul(x, x), 0.5)
            loss = T.mul(y, y).sum()
            T.backward(loss)
            return loss.data.copy(), x.grad.copy()

        l1, g1 = run()
        T.clear_tape()
        l2, g2 = run()
        assert np.array_equal(l1, l2) and np.array_equal(g1, g2)
