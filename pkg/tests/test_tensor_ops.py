"""Autodiff engine: forward op contracts, backward correctness against
finite differences, and the custom-backward-rule registry."""

import numpy as np
import pytest

import auxquant as aq
from auxquant import ops
from auxquant.errors import NumericFaultError, ShapeMismatchError
from auxquant.tensor import Tensor, backward, backward_multi, register_custom_backward

from oracles import conv2d_reference, max_rel_error, numeric_grad


def t(data, grad=False, name=None, dtype=np.float64):
    return Tensor(np.asarray(data), requires_grad=grad, name=name, dtype=dtype)


class TestForwardOps:
    def test_relu_definition(self):
        out = ops.relu(t([-1.0, 0.0, 2.0]))
        assert out.data.tolist() == [0.0, 0.0, 2.0]

    def test_conv2d_all_ones(self):
        # 3x3 ones against a 2x2 ones kernel: every window sums to 4
        out = ops.conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 2, 2))))
        assert out.data.shape == (1, 1, 2, 2)
        assert (out.data == 4.0).all()

    def test_add_zero_identity_bit_exact(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        out = ops.add(t(x), t(np.zeros_like(x)))
        assert (out.data == x).all()

    def test_conv2d_matches_direct_reference(self):
        gen = np.random.default_rng(7)
        x = gen.standard_normal((2, 3, 9, 9))
        w = gen.standard_normal((5, 3, 3, 3))
        for stride, pad in [(1, 0), (1, 1), (2, 1), (3, 0)]:
            got = ops.conv2d(t(x), t(w), stride=stride, padding=pad).data
            want = conv2d_reference(x, w, stride, pad)
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_conv2d_shape_errors(self):
        with pytest.raises(ShapeMismatchError, match="channels"):
            ops.conv2d(t(np.ones((1, 2, 4, 4))), t(np.ones((1, 3, 3, 3))))
        with pytest.raises(ShapeMismatchError, match="too small"):
            ops.conv2d(t(np.ones((1, 1, 2, 2))), t(np.ones((1, 1, 3, 3))))

    def test_matmul_shape_error_names_op_and_dims(self):
        with pytest.raises(ShapeMismatchError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
            ops.matmul(t(np.ones((2, 3))), t(np.ones((4, 2))))

    def test_nonfinite_output_is_numeric_fault(self):
        big = t(np.array([1e300]), grad=True)
        with np.errstate(over="ignore"), pytest.raises(NumericFaultError, match="non-finite"):
            ops.mul(big, big)

    def test_softmax_ce_label_range(self):
        with pytest.raises(ValueError, match="label out of range"):
            ops.softmax_cross_entropy(t(np.zeros((2, 3))), np.array([0, 3]))

    def test_apply_dispatch(self):
        out = ops.apply("relu", t([-2.0, 5.0]))
        assert out.data.tolist() == [0.0, 5.0]
        with pytest.raises(ValueError, match="unsupported op kind"):
            ops.apply("fft", t([1.0]))


class TestBackward:
    def test_linear_form(self):
        x = np.array([2.0, -1.0, 0.5])
        w = t([1.0, 1.0, 1.0], grad=True, name="w")
        grads = backward(ops.sum_all(ops.mul(w, t(x))))
        np.testing.assert_array_equal(grads["w"], x)

    def test_relu_flat_region(self):
        w = t(np.array(-1.0), grad=True, name="w")
        grads = backward(ops.relu(w))
        assert grads["w"] == 0.0

    def test_scalar_precondition(self):
        w = t([1.0, 2.0], grad=True, name="w")
        with pytest.raises(ValueError, match="scalar"):
            backward(ops.relu(w))

    def test_unreachable_leaf_absent(self):
        w = t(np.array(1.0), grad=True, name="w")
        other = t(np.array(1.0), grad=True, name="other")
        grads = backward(ops.tanh(w))
        assert "other" not in grads

    def test_two_conv_net_matches_finite_differences(self):
        gen = np.random.default_rng(11)
        x = gen.standard_normal((2, 2, 6, 6))
        w1 = t(gen.standard_normal((3, 2, 3, 3)) * 0.5, grad=True, name="w1")
        w2 = t(gen.standard_normal((2, 3, 3, 3)) * 0.5, grad=True, name="w2")
        labels = np.array([0, 1])

        def loss():
            h = ops.relu(ops.conv2d(Tensor(x), w1, padding=1))
            h = ops.conv2d(h, w2, stride=2, padding=1)
            return ops.softmax_cross_entropy(ops.global_avg_pool(h), labels)

        grads = backward(loss())
        for w in (w1, w2):
            num = numeric_grad(lambda: loss().data, w.data)
            assert max_rel_error(grads[w.name], num) < 1e-5

    def test_batchnorm_train_mode_matches_finite_differences(self):
        gen = np.random.default_rng(3)
        x = t(gen.standard_normal((4, 3, 5, 5)), grad=True, name="x")
        gamma = t(gen.uniform(0.5, 1.5, 3), grad=True, name="gamma")
        beta = t(gen.standard_normal(3), grad=True, name="beta")

        def loss():
            rm, rv = np.zeros(3), np.ones(3)
            out = ops.batchnorm(x, gamma, beta, rm, rv, training=True)
            return ops.sum_all(ops.tanh(out))

        grads = backward(loss())
        for leaf in (x, gamma, beta):
            num = numeric_grad(lambda: loss().data, leaf.data)
            assert max_rel_error(grads[leaf.name], num) < 1e-5, leaf.name

    def test_linearity_of_backward(self):
        gen = np.random.default_rng(5)
        w = t(gen.standard_normal(6), grad=True, name="w")
        x1, x2 = gen.standard_normal(6), gen.standard_normal(6)
        l1 = ops.sum_all(ops.mul(w, Tensor(x1)))
        l2 = ops.sum_all(ops.tanh(ops.mul(w, Tensor(x2))))
        a, b = 0.37, -2.5
        combined = backward(ops.add(ops.scale(l1, a), ops.scale(l2, b)))["w"]
        separate = a * backward(l1)["w"] + b * backward(l2)["w"]
        np.testing.assert_allclose(combined, separate, rtol=0, atol=1e-12)

    def test_backward_multi_channels_match_single_passes(self):
        gen = np.random.default_rng(9)
        w = t(gen.standard_normal((3, 3)), grad=True, name="w")
        h = ops.tanh(ops.matmul(w, Tensor(gen.standard_normal((3, 3)))))
        l1 = ops.sum_all(h)
        l2 = ops.sum_all(ops.mul(h, h))
        multi = backward_multi([l1, l2])
        np.testing.assert_array_equal(multi[0]["w"], backward(l1)["w"])
        np.testing.assert_array_equal(multi[1]["w"], backward(l2)["w"])

    def test_determinism_bit_identical(self):
        def run():
            gen = np.random.default_rng(21)
            w = t(gen.standard_normal((4, 4)), grad=True, name="w")
            x = Tensor(gen.standard_normal((4, 4)))
            loss = ops.softmax_cross_entropy(ops.matmul(x, w), np.array([0, 1, 2, 3]))
            return loss.data.copy(), backward(loss)["w"]

        (l1, g1), (l2, g2) = run(), run()
        assert l1 == l2
        assert (g1 == g2).all()


class TestRandomizedGraphGradients:
    """Gradient oracle over randomized small op graphs (smooth-op pool)."""

    @pytest.mark.parametrize("seed", range(4))
    def test_random_chain(self, seed):
        gen = np.random.default_rng(seed)
        w = t(gen.standard_normal((4, 4)), grad=True, name="w")
        x = Tensor(gen.standard_normal((4, 4)))
        kinds = gen.choice(["tanh", "mul_const", "matmul", "shift", "scale"], size=5)

        def build():
            h = ops.matmul(w, x)
            for kind in kinds:
                if kind == "tanh":
                    h = ops.tanh(h)
                elif kind == "mul_const":
                    h = ops.mul(h, Tensor(np.full((4, 4), 0.7)))
                elif kind == "matmul":
                    h = ops.matmul(h, x)
                elif kind == "shift":
                    h = ops.shift(h, 0.3)
                else:
                    h = ops.scale(h, 0.5)
            return ops.sum_all(ops.tanh(h))

        analytic = backward(build())["w"]
        numeric = numeric_grad(lambda: build().data, w.data)
        assert max_rel_error(analytic, numeric) < 1e-5


class TestCustomBackwardRegistry:
    def test_round_zero_gradient_without_registration(self):
        x = t([0.2, 1.7], grad=True, name="x")
        grads = backward(ops.sum_all(ops.round_ste_target(x)))
        assert (grads["x"] == 0.0).all()

    def test_identity_ste_on_round(self):
        handle = register_custom_backward("round", lambda ctx, g: (g,))
        try:
            x = t([0.2, 1.7], grad=True, name="x")
            grads = backward(ops.sum_all(ops.round_ste_target(x)))
            assert (grads["x"] == 1.0).all()
        finally:
            handle.remove()
        # removal restores the built-in zero rule
        x = t([0.2], grad=True, name="x")
        assert backward(ops.sum_all(ops.round_ste_target(x)))["x"][0] == 0.0

    def test_clipped_ste_on_clip(self):
        # same indicator as the built-in rule; exercises rule replacement
        handle = register_custom_backward(
            "clip", lambda ctx, g: (g * ctx["mask"],))
        try:
            x = t([-0.5, 0.5, 1.5], grad=True, name="x")
            grads = backward(ops.sum_all(ops.clip(x, 0.0, 1.0)))
            assert grads["x"].tolist() == [0.0, 1.0, 0.0]
        finally:
            handle.remove()

    def test_registration_applies_to_existing_tape(self):
        x = t([0.4], grad=True, name="x")
        loss = ops.sum_all(ops.round_ste_target(x))
        handle = register_custom_backward("round", lambda ctx, g: (g,))
        try:
            assert backward(loss)["x"][0] == 1.0
        finally:
            handle.remove()

    def test_unknown_op_rejected(self):
        with pytest.raises(ValueError, match="unknown op id"):
            register_custom_backward("no_such_op", lambda ctx, g: (g,))

    def test_rule_shape_violation_is_numeric_fault(self):
        handle = register_custom_backward(
            "round", lambda ctx, g: (np.zeros(99, dtype=g.dtype),))
        try:
            x = t([1.0, 2.0], grad=True, name="x")
            with pytest.raises(NumericFaultError, match="round"):
                backward(ops.sum_all(ops.round_ste_target(x)))
        finally:
            handle.remove()
