"""Quantizer contracts: grids, straight-through gradients, scheme dispatch."""

import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import auxquant as aq
from auxquant import ops, quantize
from auxquant.quantize import (PrecisionPolicy, QuantScheme, binarize,
                               quantize_activation, quantize_unit,
                               quantize_weight)
from auxquant.tensor import Tensor, backward

from oracles import nearest_grid_point


def t(data, grad=False, name=None):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad, name=name)


class TestQuantizeUnit:
    @pytest.mark.parametrize("bits", range(1, 9))
    def test_endpoints(self, bits):
        assert quantize_unit(t(np.array(0.0)), bits).data == 0.0
        assert quantize_unit(t(np.array(1.0)), bits).data == 1.0

    def test_tie_at_half_k2(self):
        # grid {0, 1/3, 2/3, 1}: 0.5 ties between 1/3 and 2/3, away-from-zero
        # rounding picks round(1.5) = 2, i.e. 2/3
        got = quantize_unit(t(np.array(0.5)), 2).data
        assert got == 2.0 / 3.0
        assert got == nearest_grid_point(0.5, 2)

    @pytest.mark.parametrize("bits", [1, 2, 3, 5, 8])
    def test_matches_enumeration_oracle(self, bits):
        xs = np.random.default_rng(bits).random(200)
        got = quantize_unit(t(xs), bits).data
        want = np.array([nearest_grid_point(float(x), bits) for x in xs])
        np.testing.assert_array_equal(got, want)

    def test_grid_membership_bit_exact(self):
        for bits in range(1, 9):
            levels = (1 << bits) - 1
            grid = np.arange(levels + 1) / levels
            xs = np.random.default_rng(bits).random(10_000)
            out = quantize_unit(t(xs), bits).data
            assert np.isin(out, grid).all()

    def test_idempotent(self):
        xs = np.random.default_rng(0).random(10_000)
        for bits in (1, 3, 8):
            once = quantize_unit(t(xs), bits).data
            twice = quantize_unit(t(once), bits).data
            np.testing.assert_array_equal(once, twice)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(1, 8))
    @settings(max_examples=200, deadline=None)
    def test_monotone(self, a, b, bits):
        lo, hi = min(a, b), max(a, b)
        qlo = quantize_unit(t(np.array(lo)), bits).data
        qhi = quantize_unit(t(np.array(hi)), bits).data
        assert qlo <= qhi

    def test_identity_ste_backward(self):
        x = t(np.linspace(0, 1, 11), grad=True, name="x")
        grads = backward(ops.sum_all(quantize_unit(x, 3)))
        assert (grads["x"] == 1.0).all()

    def test_debug_range_check(self):
        quantize.set_debug_checks(True)
        try:
            with pytest.raises(ValueError, match="outside"):
                quantize_unit(t(np.array([1.5])), 2)
        finally:
            quantize.set_debug_checks(False)


class TestQuantizeWeight:
    def test_all_zero_layer_guard(self, caplog):
        w = t(np.zeros(8), grad=True, name="w")
        with caplog.at_level(logging.WARNING, logger="auxquant.quantize"):
            out = quantize_weight(w, 2)
        assert (out.data == 0.0).all()
        assert not out.requires_grad
        assert any("zeros" in r.message for r in caplog.records)

    def test_symmetric_pair_k1(self):
        for scale in (0.1, 1.0, 7.0):
            out = quantize_weight(t(np.array([-scale, scale])), 1)
            np.testing.assert_array_equal(out.data, [-1.0, 1.0])

    @given(st.integers(1, 8), st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_sign_preserved_and_range(self, bits, seed):
        w = np.random.default_rng(seed).standard_normal(64)
        out = quantize_weight(t(w), bits).data
        assert (np.abs(out) <= 1.0).all()
        nonzero = out != 0
        assert (np.sign(out[nonzero]) == np.sign(w[nonzero])).all()

    def test_level_count(self):
        # k bits must produce exactly 2^k distinct levels over a dense sweep
        w = np.linspace(-3, 3, 20_001)
        for bits in (1, 2, 3):
            out = quantize_weight(t(w), bits).data
            assert len(np.unique(out)) == 1 << bits

    def test_backward_tanh_chain_with_constant_max(self):
        w = t(np.array([0.3, -1.2, 0.9]), grad=True, name="w")
        grads = backward(ops.sum_all(quantize_weight(w, 2)))
        tw = np.tanh(w.data)
        m = np.abs(tw).max()
        expected = (1.0 - tw * tw) / m  # 2 * (1 - tanh^2) / (2 m), max constant
        np.testing.assert_allclose(grads["w"], expected, rtol=1e-12)


class TestQuantizeActivation:
    def test_saturation_value_and_grad(self):
        a = t(np.array([2.5]), grad=True, name="a")
        out = quantize_activation(a, 3)
        assert out.data[0] == 1.0
        assert backward(ops.sum_all(out))["a"][0] == 0.0

    def test_below_half_grid_k1(self):
        assert quantize_activation(t(np.array([0.4])), 1).data[0] == 0.0

    @given(st.floats(-2, 3), st.floats(-2, 3), st.integers(1, 8))
    @settings(max_examples=200, deadline=None)
    def test_monotone(self, a, b, bits):
        lo, hi = min(a, b), max(a, b)
        qlo = quantize_activation(t(np.array(lo)), bits).data
        qhi = quantize_activation(t(np.array(hi)), bits).data
        assert qlo <= qhi

    @pytest.mark.parametrize("bits", [1, 2, 4])
    def test_ste_is_exact_range_indicator(self, bits):
        grid = np.linspace(-1.0, 2.0, 101)
        a = t(grid, grad=True, name="a")
        grads = backward(ops.sum_all(quantize_activation(a, bits)))
        indicator = ((grid >= 0.0) & (grid <= 1.0)).astype(np.float64)
        np.testing.assert_array_equal(grads["a"], indicator)


class TestBinarize:
    def test_sign_definition(self):
        out = binarize(t(np.array([-0.3, 0.0, 5.0])))
        np.testing.assert_array_equal(out.data, [-1.0, 1.0, 1.0])

    def test_clipped_ste(self):
        x = t(np.array([2.0, 0.5, -0.5, -3.0]), grad=True, name="x")
        grads = backward(ops.sum_all(binarize(x)))
        np.testing.assert_array_equal(grads["x"], [0.0, 1.0, 1.0, 0.0])

    def test_output_set(self):
        xs = np.random.default_rng(2).standard_normal(10_000)
        out = binarize(t(xs)).data
        assert set(np.unique(out)) <= {-1.0, 1.0}


class TestSchemes:
    def test_full_scheme_is_exact_identity(self):
        w = t(np.random.default_rng(1).standard_normal(10), grad=True, name="w")
        out = quantize.quantize_weight_for(QuantScheme.full(), w)
        assert out is w  # not even a copy
        a = t(np.array([-0.5, 1.7]), grad=True, name="a")
        out = quantize.quantize_activation_for(QuantScheme.full(), a)
        assert out is a
        grads = backward(ops.sum_all(ops.tanh(out)))
        np.testing.assert_allclose(grads["a"], 1 - np.tanh(a.data) ** 2, rtol=1e-15)

    def test_uniform_level_invariant(self):
        with pytest.raises(ValueError):
            QuantScheme.uniform(0)
        with pytest.raises(ValueError):
            QuantScheme("full", bits=4)
        with pytest.raises(ValueError):
            QuantScheme("weird")

    def test_default_policy(self):
        pol = PrecisionPolicy.default(2)
        assert pol.first_layer == QuantScheme.uniform(8)
        assert pol.last_layer == QuantScheme.uniform(8)
        assert pol.interior == QuantScheme.uniform(2)
        assert pol.activation == QuantScheme.uniform(2)

    def test_policy_serialization_round_trip(self):
        pol = PrecisionPolicy.binary_default()
        again = PrecisionPolicy.from_dict(pol.to_dict())
        assert again == pol
