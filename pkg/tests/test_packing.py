from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from singleload.packing import (PackedOperand, QuantParams, common_multipliers, dequantize,
                                exhaustive_packing_check, fixed_multiplier, pack_operands,
                                packed_multiply, quantize, requantize, round_shift, unpack_operands)

i8 = st.integers(-128, 127)


def test_pack_examples():
    assert pack_operands(5, 7).raw == 1_310_727
    assert pack_operands(0, 0).raw == 0
    assert pack_operands(3, -1).raw == 1_048_575
    assert pack_operands(3, -1).unpack() == (3, -1)


def test_multiply_examples():
    r = packed_multiply(3, pack_operands(5, 7))
    assert (r.hi, r.lo) == (15, 21)
    r = packed_multiply(2, pack_operands(3, -1))
    assert (r.hi, r.lo) == (6, -2)
    assert (r.raw >> 18) == 7          # high field before the borrow correction
    r = packed_multiply(-128, pack_operands(-128, -128))
    assert (r.hi, r.lo) == (16384, 16384)


@given(i8, i8, i8)
def test_packed_multiply_matches_scalar(a, b, c):
    p = pack_operands(b, c)
    assert 0 <= p.raw < 2 ** 27
    r = packed_multiply(a, p)
    assert (r.hi, r.lo) == (a * b, a * c)
    assert -(2 ** 15) <= r.lo < 2 ** 15 and -(2 ** 15) <= r.hi <= 2 ** 15
    assert 0 <= r.raw < 2 ** 45


@given(i8, i8)
def test_unpack_roundtrip(b, c):
    assert unpack_operands(pack_operands(b, c).raw) == (b, c)


def test_operand_range():
    with pytest.raises(ValueError):
        PackedOperand(2 ** 27)
    with pytest.raises(ValueError):
        pack_operands(128, 0)


def test_fault_hook_is_caught():
    ok, n, bad = exhaustive_packing_check(a_values=[-3, 7], fault=lambda hi, lo: (hi, lo + (lo == 21)))
    assert not ok and n == 2 * 65536
    assert bad and all(a * c == 21 for a, _, c in bad)


def test_quantize_examples():
    assert quantize(0.0, QuantParams(0.37)) == 0
    assert quantize(12.74, QuantParams(0.1)) == 127
    q = QuantParams(0.5)
    assert quantize(1.3, q) == 3
    assert dequantize(3, q) == 1.5
    assert quantize(0.25, q) == 0 and quantize(0.75, q) == 2     # half to even


@given(st.floats(-50, 50), st.floats(0.01, 1.0))
def test_quantize_error_bound(x, s):
    q = QuantParams(s)
    if -128 * s <= x <= 127 * s:
        assert abs(dequantize(quantize(x, q), q) - x) <= s / 2 + 1e-12


@given(st.integers(-2 ** 40, 2 ** 40), st.integers(0, 30))
def test_round_shift_is_round_half_even(x, sh):
    exact = Fraction(x, 2 ** sh)
    assert int(round_shift(x, sh)) == round(exact)       # Python rounds half to even


@given(st.floats(1e-6, 1e3))
def test_fixed_multiplier_precision(r):
    m = fixed_multiplier(r)
    assert 2 ** 29 <= m.mult < 2 ** 30
    assert abs(m.value - r) <= r * 2.0 ** -29


def test_requantize_saturates():
    m = fixed_multiplier(1.0)
    assert list(requantize(np.array([300, -300, 5]), m)) == [127, -128, 5]


def test_common_multipliers_share_shift():
    (a, b), sh = common_multipliers([0.75, 0.001])
    assert abs(a / 2 ** sh - 0.75) < 1e-9 and abs(b / 2 ** sh - 0.001) < 1e-9
