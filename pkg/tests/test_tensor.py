import numpy as np
import pytest

from speechlab import tensor as T
from speechlab.checks import finite_diff_grad, gradcheck, max_rel_err
from speechlab.errors import GradMissingError, NonFiniteError, ShapeError, TapeError


def _rng(tag="t"):
    return T.Rng(1234).child(tag)


class TestMatmul:
    def test_identity(self):
        eye = T.constant(np.eye(2))
        out = T.matmul(eye, T.constant(np.eye(2)))
        np.testing.assert_array_equal(out.data, np.eye(2))

    def test_hand_case(self):
        a = T.constant([[1.0, 2.0], [3.0, 4.0]])
        b = T.constant([[5.0], [6.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[17.0], [39.0]])

    def test_shape_error_reports_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.constant(np.zeros((2, 3))), T.constant(np.zeros((2, 3))))

    def test_gradients_match_finite_differences(self):
        rng = _rng("mm")
        a = T.Tensor(rng.normal((3, 4)), requires_grad=True)
        b = T.Tensor(rng.normal((4, 2)), requires_grad=True)
        tgt = rng.normal((3, 2))

        def loss():
            return T.mse(T.matmul(a, b), T.constant(tgt))

        ok, err = gradcheck(loss, [a, b], tol=1e-6)
        assert ok, f"max rel err {err}"


class TestConv1d:
    @staticmethod
    def conv_oracle(x, w, stride, padding):
        # independent nested-loop cross-correlation
        c_out, c_in, k = w.shape
        xp = np.pad(x, ((0, 0), (padding, padding)))
        t_out = (xp.shape[1] - k) // stride + 1
        out = np.zeros((c_out, t_out))
        for o in range(c_out):
            for t in range(t_out):
                acc = 0.0
                for i in range(c_in):
                    for kk in range(k):
                        acc += w[o, i, kk] * xp[i, t * stride + kk]
                out[o, t] = acc
        return out

    def test_zero_input(self):
        x = T.constant(np.zeros((2, 10)))
        w = T.constant(np.ones((3, 2, 3)))
        assert np.all(T.conv1d(x, w).data == 0.0)

    def test_scaling_kernel(self):
        x = T.constant(np.arange(8.0)[None, :])
        w = T.constant(np.array([[[2.0]]]))
        np.testing.assert_array_equal(T.conv1d(x, w).data, 2.0 * x.data)

    def test_matches_nested_loop_oracle(self):
        rng = _rng("conv")
        x = rng.normal((2, 16))
        w = rng.normal((3, 2, 4))
        got = T.conv1d(T.constant(x), T.constant(w), stride=2).data
        np.testing.assert_allclose(got, self.conv_oracle(x, w, 2, 0), atol=1e-12)
        got_p = T.conv1d(T.constant(x), T.constant(w), stride=3, padding=2).data
        np.testing.assert_allclose(got_p, self.conv_oracle(x, w, 3, 2), atol=1e-12)

    def test_gradcheck(self):
        rng = _rng("convg")
        x = T.Tensor(rng.normal((2, 16)), requires_grad=True)
        w = T.Tensor(rng.normal((3, 2, 4)), requires_grad=True)

        def loss():
            return T.tmean(T.mul(T.conv1d(x, w, stride=2), T.conv1d(x, w, stride=2)))

        ok, err = gradcheck(loss, [x, w], tol=1e-6)
        assert ok, f"max rel err {err}"

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError, match="kernel"):
            T.conv1d(T.constant(np.zeros((1, 3))), T.constant(np.zeros((1, 1, 6))))


class TestTransposedConv1d:
    def test_adjoint_identity(self):
        # <conv(x), y> == <x, conv^T(y)> for shared weight/stride/padding
        rng = _rng("adj")
        for stride, padding in [(1, 0), (2, 1), (3, 2)]:
            x = rng.normal((1, 8))
            w = rng.normal((2, 1, 4))
            cx = T.conv1d(T.constant(x), T.constant(w), stride, padding).data
            y = rng.normal(cx.shape)
            ty = T.transposed_conv1d(T.constant(y), T.constant(w), stride, padding,
                                     output_length=8).data
            assert ty.shape == x.shape
            assert abs(np.sum(cx * y) - np.sum(x * ty)) < 1e-10

    def test_zero_input(self):
        out = T.transposed_conv1d(T.constant(np.zeros((2, 5))), T.constant(np.ones((2, 3, 2))))
        assert np.all(out.data == 0.0)

    def test_stride1_k1_reduces_to_scaling(self):
        x = np.arange(6.0)[None, :]
        w = np.array([[[3.0]]])
        out = T.transposed_conv1d(T.constant(x), T.constant(w))
        np.testing.assert_array_equal(out.data, 3.0 * x)

    def test_gradcheck(self):
        rng = _rng("tconvg")
        x = T.Tensor(rng.normal((3, 6)), requires_grad=True)
        w = T.Tensor(rng.normal((3, 2, 4)), requires_grad=True)

        def loss():
            return T.tmean(T.tanh(T.transposed_conv1d(x, w, stride=2, padding=1)))

        ok, err = gradcheck(loss, [x, w], tol=1e-6)
        assert ok, f"max rel err {err}"


class TestElementwise:
    def test_mse_identity_is_zero(self):
        x = T.constant(_rng().normal((3, 3)))
        assert T.mse(x, x).item() == 0.0

    def test_mse_hand_value(self):
        assert T.mse(T.constant([1.0, 2.0]), T.constant([3.0, 2.0])).item() == pytest.approx(2.0)

    def test_softmax_uniform(self):
        out = T.softmax_lastdim(T.constant([1.5, 1.5, 1.5, 1.5]))
        np.testing.assert_allclose(out.data, [0.25] * 4)

    def test_softmax_handles_neg_inf_mask(self):
        out = T.softmax_lastdim(T.constant([[0.0, -np.inf], [0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1.0, 0.0], [0.5, 0.5]])

    def test_log_domain_error_names_op(self):
        with pytest.raises(NonFiniteError, match="log"):
            T.log(T.constant([-1.0]))

    def test_exp_overflow_names_op(self):
        with pytest.raises(NonFiniteError, match="exp"):
            T.exp(T.constant([1e4]))

    def test_no_implicit_broadcasting(self):
        with pytest.raises(ShapeError):
            T.add(T.constant(np.zeros((2, 3))), T.constant(np.zeros(3)))


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.tsum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_linear_regression_grads_match_fd(self):
        rng = _rng("bw")
        w = T.Tensor(rng.normal((3, 2)), requires_grad=True)
        x = T.constant(rng.normal((4, 3)))
        y = T.constant(rng.normal((4, 2)))

        def loss():
            return T.mse(T.matmul(x, w), y)

        T.reset_tape()
        loss().backward()
        analytic = w.grad.copy()
        numeric = finite_diff_grad(loss, [w])[0]
        assert max_rel_err(analytic, numeric) < 1e-6

    def test_composite_tanh_matmul_chain(self):
        rng = _rng("chain")
        w1 = T.Tensor(rng.normal((4, 5)), requires_grad=True)
        w2 = T.Tensor(rng.normal((5, 2)), requires_grad=True)
        x = T.constant(rng.normal((3, 4)))

        def loss():
            return T.tmean(T.tanh(T.matmul(T.tanh(T.matmul(x, w1)), w2)))

        ok, err = gradcheck(loss, [w1, w2], tol=1e-6)
        assert ok, f"max rel err {err}"

    def test_non_scalar_loss_raises(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            T.backward(T.tanh(x))

    def test_repeated_backward_raises(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        loss = T.tsum(x)
        loss.backward()
        with pytest.raises(TapeError, match="consumed"):
            loss.backward()

    def test_backward_on_constant_raises(self):
        with pytest.raises(TapeError):
            T.backward(T.constant(1.0))

    def test_reuse_accumulates_and_matches_fd(self):
        rng = _rng("reuse")
        z = T.Tensor(rng.normal((3, 3)), requires_grad=True)

        def loss():
            return T.add(T.tsum(T.mul(z, z)), T.tsum(T.tanh(z)))

        ok, err = gradcheck(loss, [z], tol=1e-6)
        assert ok, f"max rel err {err}"

    def test_tape_replay_is_deterministic(self):
        def run():
            rng = T.Rng(77).child("det")
            w = T.Tensor(rng.normal((4, 4)), requires_grad=True)
            x = T.constant(rng.normal((4, 4)))
            loss = T.mse(T.tanh(T.matmul(x, w)), T.constant(np.zeros((4, 4))))
            loss.backward()
            return loss.item(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)


class TestOptimizers:
    def test_sgd_scalar(self):
        p = T.Tensor(np.array(1.0), requires_grad=True)
        p.grad = np.array(1.0)
        T.sgd_step([p], lr=0.1)
        assert p.data == pytest.approx(0.9)

    def test_sgd_missing_grad_raises(self):
        p = T.Tensor(np.array(1.0), requires_grad=True)
        with pytest.raises(GradMissingError):
            T.sgd_step([p], lr=0.1)

    def test_adam_first_step_moves_by_lr_against_grad(self):
        # bias-corrected first step is lr * g / (|g| + eps) ~= lr * sign(g)
        for gval in (0.3, -2.0):
            p = T.Tensor(np.array(0.5), requires_grad=True)
            p.grad = np.array(gval)
            state = T.init_adam_state([p])
            T.adam_step(state, [p], lr=0.01)
            assert p.data == pytest.approx(0.5 - 0.01 * np.sign(gval), abs=1e-6)

    def test_zero_lr_is_identity(self):
        p = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p.grad = np.array([3.0, -4.0])
        T.sgd_step([p], lr=0.0)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_adam_groups_expose_lrs(self):
        a = T.Tensor(np.zeros(2), requires_grad=True)
        b = T.Tensor(np.zeros(2), requires_grad=True)
        opt = T.Adam([("lm", {"a": a}, 1e-3), ("tok", {"b": b}, 5e-5)])
        lrs = opt.learning_rates()
        assert lrs["tok"] / lrs["lm"] == pytest.approx(0.05)

    def test_adam_state_roundtrip(self):
        rng = _rng("adam")
        p = T.Tensor(rng.normal((3,)), requires_grad=True)
        opt = T.Adam([("g", {"p": p}, 1e-2)])
        for _ in range(3):
            p.grad = rng.normal((3,))
            opt.step()
        arrays = {k: v.copy() for k, v in opt.state_arrays().items()}
        p2 = T.Tensor(p.data.copy(), requires_grad=True)
        opt2 = T.Adam([("g", {"p": p2}, 1e-2)])
        opt2.load_state_arrays(arrays)
        g = rng.normal((3,))
        p.grad = g.copy()
        p2.grad = g.copy()
        opt.step()
        opt2.step()
        np.testing.assert_array_equal(p.data, p2.data)


class TestRng:
    def test_children_are_order_independent(self):
        r1 = T.Rng(5)
        a = r1.child("a").normal((4,))
        r2 = T.Rng(5)
        _ = r2.child("b").normal((100,))
        a2 = r2.child("a").normal((4,))
        np.testing.assert_array_equal(a, a2)

    def test_different_tags_differ(self):
        r = T.Rng(5)
        assert not np.array_equal(r.child("a").normal((8,)), r.child("b").normal((8,)))


class TestNoGrad:
    def test_no_grad_disables_recording(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.tsum(x)
        assert y._node is None and not y.requires_grad
