"""Field arithmetic and fixed-point codec checks.

The independent oracles here are gmpy2 (big-integer arithmetic) and plain
double-precision floats; everything asserted against them was computed by the
oracle, not by the code under test.
"""

import random

import gmpy2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppfa import fieldfix as ff
from ppfa.errors import DecodeOutOfBand, OverflowRange

PARAMS = ff.DEFAULT_PARAMS
TOY = ff.FieldParams(p=ff.P_TOY, h=2, k=6, lambda_stat=12)


def test_default_prime_is_m127():
    assert PARAMS.p == 2**127 - 1
    assert PARAMS.p > 2 ** (PARAMS.k + PARAMS.lambda_stat + 1)


def test_bad_params_rejected():
    with pytest.raises(ValueError):
        ff.FieldParams(p=2**127 - 1, h=64, k=64)
    with pytest.raises(ValueError):
        ff.FieldParams(p=(1 << 89) - 1, h=32, k=64, lambda_stat=40)  # too little headroom
    with pytest.raises(ValueError):
        ff.FieldParams(p=2**61 - 3, h=2, k=6, lambda_stat=12)  # composite


# --- encoding -----------------------------------------------------------------


def test_encode_one():
    assert ff.encode(1.0, PARAMS) == 4294967296  # 2**32


def test_encode_zero():
    assert ff.encode(0.0, PARAMS) == 0


def test_encode_negative_sign_convention():
    # -1.5 maps to p - 6442450944 (modular negation of 1.5 * 2**32)
    assert ff.encode(-1.5, PARAMS) == PARAMS.p - 6442450944
    x = 23.375
    assert ff.encode(-x, PARAMS) == (PARAMS.p - ff.encode(x, PARAMS)) % PARAMS.p


def test_decode_known_values():
    assert ff.decode(4294967296, PARAMS) == 1.0
    assert ff.decode(PARAMS.p - 2147483648, PARAMS) == -0.5


def test_encode_overflow():
    with pytest.raises(OverflowRange):
        ff.encode(PARAMS.max_abs * 1.01, PARAMS)
    with pytest.raises(OverflowRange):
        ff.encode(float("nan"), PARAMS)


def test_decode_out_of_band():
    with pytest.raises(DecodeOutOfBand):
        ff.decode(PARAMS.p // 3, PARAMS)


def test_round_trip_grid_scale():
    # 1e5 random multiples of 2**-32 with |x| <= 2**30: exact round trip
    rng = random.Random(7)
    for _ in range(100_000):
        mant = rng.getrandbits(30 + 32) - (1 << 61)
        x = mant * 2.0**-32
        if abs(x) >= 2**30:
            continue
        x = float(np.float64(x))
        assert ff.decode(ff.encode(x, PARAMS), PARAMS) == x


def test_rounding_half_away_from_zero():
    # 1.5 ulp rounds away from zero to 2 ulp, symmetrically for negatives
    x = 3 * 2.0**-33
    assert ff.decode(ff.encode(x, PARAMS), PARAMS) == 2.0**-31
    assert ff.decode(ff.encode(-x, PARAMS), PARAMS) == -(2.0**-31)


# --- field ops vs big-integer oracle -------------------------------------------


def test_field_inv_identity():
    rng = random.Random(1)
    for _ in range(10_000):
        a = rng.randrange(1, PARAMS.p)
        assert ff.field_mul(a, ff.field_inv(a, PARAMS), PARAMS) == 1


def test_add_negation():
    rng = random.Random(2)
    for _ in range(1000):
        x = rng.randrange(PARAMS.p)
        assert ff.field_add(x, PARAMS.p - x, PARAMS) == 0


def test_field_inv_zero():
    with pytest.raises(ZeroDivisionError):
        ff.field_inv(0, PARAMS)


def test_agreement_with_gmpy2_oracle_small_prime():
    p = ff.P_TOY
    params = TOY
    rng = random.Random(3)
    for _ in range(20_000):
        a = rng.randrange(p)
        b = rng.randrange(p)
        assert ff.field_add(a, b, params) == int(gmpy2.f_mod(gmpy2.mpz(a) + b, p))
        assert ff.field_sub(a, b, params) == int(gmpy2.f_mod(gmpy2.mpz(a) - b, p))
        assert ff.field_mul(a, b, params) == int(gmpy2.f_mod(gmpy2.mpz(a) * b, p))
        if a:
            assert ff.field_inv(a, params) == int(gmpy2.invert(gmpy2.mpz(a), p))


@settings(max_examples=300, deadline=None)
@given(
    a=st.integers(min_value=0, max_value=PARAMS.p - 1),
    b=st.integers(min_value=0, max_value=PARAMS.p - 1),
    c=st.integers(min_value=0, max_value=PARAMS.p - 1),
)
def test_ring_laws(a, b, c):
    add, mul = ff.field_add, ff.field_mul
    assert add(add(a, b, PARAMS), c, PARAMS) == add(a, add(b, c, PARAMS), PARAMS)
    assert mul(mul(a, b, PARAMS), c, PARAMS) == mul(a, mul(b, c, PARAMS), PARAMS)
    assert mul(a, add(b, c, PARAMS), PARAMS) == add(
        mul(a, b, PARAMS), mul(a, c, PARAMS), PARAMS
    )


@settings(max_examples=300, deadline=None)
@given(
    x=st.integers(min_value=-(2**40), max_value=2**40),
    y=st.integers(min_value=-(2**40), max_value=2**40),
)
def test_encode_additive_homomorphism(x, y):
    # x, y as multiples of 2**-32 so that sums stay exactly representable
    fx, fy = x * 2.0**-12, y * 2.0**-12
    lhs = ff.field_add(ff.encode(fx, PARAMS), ff.encode(fy, PARAMS), PARAMS)
    assert lhs == ff.encode(fx + fy, PARAMS)


# --- public truncation ----------------------------------------------------------


def test_truncate_exact_product():
    raw = ff.encode(6.0, PARAMS, scale_bits=2 * PARAMS.h)
    assert ff.public_truncate(raw, PARAMS) == ff.encode(6.0, PARAMS)


def test_truncate_product_code():
    a = ff.encode(2.5, PARAMS)
    b = ff.encode(3.5, PARAMS)
    prod = ff.field_mul(a, b, PARAMS)  # scale 2h
    got = ff.decode(ff.public_truncate(prod, PARAMS), PARAMS)
    assert abs(got - 8.75) <= 2.0**-32


def test_truncate_random_products_vs_double_oracle():
    rng = random.Random(5)
    for _ in range(10_000):
        x = rng.uniform(-1000, 1000)
        y = rng.uniform(-1000, 1000)
        prod = ff.field_mul(ff.encode(x, PARAMS), ff.encode(y, PARAMS), PARAMS)
        got = ff.decode(ff.public_truncate(prod, PARAMS), PARAMS)
        # each encode contributes <= 0.5 ulp at 2**-32; truncation <= 1 ulp
        tol = (abs(x) + abs(y) + 2) * 2.0**-32
        assert abs(got - x * y) <= tol


# --- wire format ---------------------------------------------------------------


def test_wire_round_trip():
    rng = random.Random(6)
    vals = [rng.randrange(PARAMS.p) for _ in range(100)]
    packed = ff.pack_elements(vals)
    assert len(packed) == 16 * len(vals)
    assert ff.unpack_elements(packed) == vals
    assert ff.from_wire(ff.to_wire(vals[0])) == vals[0]
    assert ff.to_wire(1) == b"\x01" + b"\x00" * 15  # little-endian


def test_array_helpers():
    x = np.array([[1.0, -2.25], [0.5, 3.0]])
    enc = ff.encode_array(x, PARAMS)
    assert enc.dtype == object
    back = ff.decode_array(enc, PARAMS)
    np.testing.assert_array_equal(back, x)
