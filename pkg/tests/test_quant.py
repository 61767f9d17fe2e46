import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from acaq.quant import (B_MAX, B_MIN, QuantScheme, QuantizerState, dequantize, derive_params,
                        fake_quant_with_grads, fake_quantize, grad_b, grad_input, grad_rv,
                        grad_vmax, in_range, integer_quantize, ptq_calibrate, round_bitwidth,
                        round_half_away)

from oracles import fake_quant as oracle_fq

SIGNED, UNSIGNED, ASYM = (QuantScheme.SIGNED_SYMMETRIC, QuantScheme.UNSIGNED_SYMMETRIC,
                          QuantScheme.ASYMMETRIC)


def test_derive_params_examples():
    p = derive_params(QuantizerState(SIGNED, b=3.2, r_v=7.0))
    assert (p.B, p.r_q, p.s, p.Z, p.q_min, p.q_max) == (3, 7, 1.0, 0, -4, 3)
    p = derive_params(QuantizerState(UNSIGNED, b=2, r_v=3.0))
    assert (p.s, p.Z, p.q_min, p.q_max) == (1.0, 0, 0, 3)
    p = derive_params(QuantizerState(ASYM, b=3, r_v=1.0, v_max=0.5))
    assert p.s == pytest.approx(1 / 7) and p.Z == 4 and p.v_min == pytest.approx(-0.5)


def test_fake_quantize_examples():
    assert float(fake_quantize(0.3, QuantizerState(ASYM, b=3, r_v=1.0, v_max=1.0))) \
        == pytest.approx(0.285714, abs=1e-6)
    assert float(fake_quantize(-10.0, QuantizerState(SIGNED, b=3, r_v=7.0))) == -4.0
    for scheme in (SIGNED, UNSIGNED):
        assert float(fake_quantize(0.0, QuantizerState(scheme, b=5, r_v=3.0))) == 0.0


def test_integer_quantize_and_dequantize_examples():
    asym = QuantizerState(ASYM, b=3, r_v=1.0, v_max=0.5)
    signed = QuantizerState(SIGNED, b=3, r_v=7.0)
    assert int(integer_quantize(0.0, asym)) == 4
    assert int(integer_quantize(3.6, signed)) == 3
    assert int(integer_quantize(0.0, QuantizerState(UNSIGNED, b=4, r_v=2.0))) == 0
    assert float(dequantize(np.array(4), asym)) == 0.0
    assert float(dequantize(np.array(3), signed)) == 3.0
    assert float(dequantize(np.array(0), asym)) == pytest.approx(-4 / 7)


def test_integer_quantize_rounds_half_away():
    st_ = QuantizerState(SIGNED, b=8, r_v=255.0)
    assert int(integer_quantize(2.5, st_)) == 3
    assert int(integer_quantize(-2.5, st_)) == -3


def test_round_half_away_ties():
    np.testing.assert_array_equal(round_half_away(np.array([0.5, 1.5, -0.5, -1.5, 2.4])),
                                  [1, 2, -1, -2, 2])


@pytest.mark.parametrize("b,expected", [(1.2, 2), (2.49, 2), (2.5, 3), (31.6, 32), (40, 32)])
def test_bitwidth_rounding_and_box(b, expected):
    assert round_bitwidth(b) == expected


def test_gradient_hand_values():
    signed = QuantizerState(SIGNED, b=3, r_v=7.0)
    unsigned = QuantizerState(UNSIGNED, b=3, r_v=7.0)
    assert float(grad_rv(-2.3, signed)) == pytest.approx(0.0428571, abs=1e-7)
    assert float(grad_rv(10.0, signed)) == pytest.approx(0.428571, abs=1e-6)
    assert float(grad_rv(-1.0, unsigned)) == 0.0
    assert float(grad_rv(10.0, unsigned)) == 1.0
    assert float(grad_b(-2.3, signed)) == pytest.approx(-0.3 * 8 * math.log(2) / 7, rel=1e-9)
    # overflow value equals the analytic d(r_v q_max / r_q)/db = r_v ln2 2^(B-1) / r_q^2
    analytic = 7 * math.log(2) * 4 / 49
    assert float(grad_b(10.0, signed)) == pytest.approx(analytic, rel=1e-12)
    assert abs(float(grad_b(10.0, signed)) - 0.396085) < 1e-6
    assert float(grad_b(10.0, unsigned)) == 0.0


def test_asymmetric_out_of_range_gradients():
    st_ = QuantizerState(ASYM, b=3, r_v=1.0, v_max=0.5)
    p = derive_params(st_)
    base = -0.5 / 1.0 - p.Z / p.r_q
    assert float(grad_rv(2.0, st_)) == pytest.approx(1 + base)
    assert float(grad_rv(-2.0, st_)) == pytest.approx(base)
    k = 8 * math.log(2) / 7
    assert float(grad_b(2.0, st_)) == pytest.approx((p.v_min + p.s * p.Z) * k)
    assert float(grad_b(-2.0, st_)) == pytest.approx((p.v_min + p.s * p.Z) * k)


def test_grad_vmax_indicator_and_symmetric_rejected():
    st_ = QuantizerState(ASYM, b=4, r_v=2.0, v_max=1.0)
    np.testing.assert_array_equal(grad_vmax(np.array([-2.0, 0.0, 1.0, 3.0]), st_), [1, 0, 0, 1])
    with pytest.raises(ValueError):
        grad_vmax(0.0, QuantizerState(SIGNED))


def test_boundary_is_in_range():
    st_ = QuantizerState(SIGNED, b=4, r_v=2.0)
    assert bool(in_range(1.0, st_)) and bool(in_range(-1.0, st_))
    assert float(grad_input(1.0, st_)) == 1.0


def test_nonpositive_range_rejected():
    with pytest.raises(ValueError):
        derive_params(QuantizerState(SIGNED, r_v=0.0))


def test_dequantize_rejects_out_of_range_codes():
    st_ = QuantizerState(UNSIGNED, b=2, r_v=3.0)
    np.testing.assert_allclose(dequantize(np.array([0, 3]), st_), [0.0, 3.0])
    with pytest.raises(ValueError):
        dequantize(np.array([4]), st_)


def test_32_bit_codes_stay_in_box_in_float32():
    st_ = QuantizerState(SIGNED, b=32, r_v=2.0)
    codes = integer_quantize(np.array([1.0, -1.0, 5.0], dtype=np.float32), st_)
    p = derive_params(st_)
    assert codes.max() <= p.q_max and codes.min() >= p.q_min


def test_ptq_calibrate():
    st_ = ptq_calibrate(np.array([-0.5, 2.0]), ASYM, 8)
    assert st_.r_v == pytest.approx(2.5) and st_.v_max == 2.0 and st_.b == 8
    assert ptq_calibrate(np.array([-3.0, 1.0]), SIGNED).r_v == 6.0
    assert ptq_calibrate(np.zeros(4), UNSIGNED).r_v > 0
    with pytest.raises(ValueError):
        ptq_calibrate(np.array([]), SIGNED)


schemes = st.sampled_from([SIGNED, UNSIGNED, ASYM])


@given(scheme=schemes, b=st.floats(2, 16), r_v=st.floats(1e-3, 100),
       frac=st.floats(0, 1), v=st.floats(-200, 200))
def test_matches_scalar_oracle(scheme, b, r_v, frac, v):
    v_max = r_v * frac if scheme is ASYM else None
    st_ = QuantizerState(scheme, b, r_v, v_max)
    assert float(fake_quantize(np.float64(v), st_)) == oracle_fq(v, scheme.value, b, r_v, v_max)


@given(scheme=schemes, b=st.floats(2, 12), r_v=st.floats(1e-2, 10), frac=st.floats(0, 1))
def test_idempotent_and_bounded(scheme, b, r_v, frac):
    st_ = QuantizerState(scheme, b, r_v, r_v * frac if scheme is ASYM else None)
    v = np.linspace(-3 * r_v, 3 * r_v, 257)
    once = fake_quantize(v, st_)
    np.testing.assert_allclose(fake_quantize(once, st_), once, atol=1e-9 * r_v)
    p = derive_params(st_)
    assert once.min() >= p.s * (p.q_min - p.Z) - 1e-12
    assert once.max() <= p.s * (p.q_max - p.Z) + 1e-12
    inside = in_range(v, st_)
    assert np.all(np.abs(once - v)[inside] <= p.s / 2 + 1e-9 * r_v)


@given(scheme=schemes, b=st.floats(2, 12), r_v=st.floats(0.1, 10))
def test_codes_in_box(scheme, b, r_v):
    st_ = QuantizerState(scheme, b, r_v)
    p = derive_params(st_)
    codes = integer_quantize(np.linspace(-5 * r_v, 5 * r_v, 101), st_)
    assert codes.min() >= p.q_min and codes.max() <= p.q_max
    np.testing.assert_allclose(dequantize(codes, st_),
                               fake_quantize(np.linspace(-5 * r_v, 5 * r_v, 101), st_))


def test_fake_quant_with_grads_consistent():
    st_ = QuantizerState(ASYM, b=5, r_v=2.0, v_max=1.5)
    v = np.linspace(-2, 3, 41)
    out, d_in, d_rv, d_b, d_vmax = fake_quant_with_grads(v, st_)
    np.testing.assert_array_equal(out, fake_quantize(v, st_))
    np.testing.assert_array_equal(d_rv, grad_rv(v, st_))
    np.testing.assert_array_equal(d_b, grad_b(v, st_))
    np.testing.assert_array_equal(d_vmax, ~d_in)


def test_dtype_preserved():
    st_ = QuantizerState(SIGNED, b=6, r_v=1.0)
    assert fake_quantize(np.ones(3, np.float32), st_).dtype == np.float32
    assert grad_rv(np.ones(3, np.float32), st_).dtype == np.float32
    assert B_MIN == 2 and B_MAX == 32
