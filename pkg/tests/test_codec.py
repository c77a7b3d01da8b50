import math
import random
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ppdo import paillier
from ppdo.codec import (
    CodecConfig,
    EncodingError,
    decode_real,
    descale,
    encode_int,
    encode_real,
    mask_to_word,
    round_half_away,
    scaled_round,
    scale_weight,
    to_signed,
)

CFG = CodecConfig()


def test_examples():
    assert encode_real(CFG, 3.14159) == 3141590
    assert encode_real(CFG, -2.5) == 18446744073707051616 == 2**64 - 2_500_000
    assert encode_real(CFG, 0.0) == 0
    assert decode_real(CFG, 3141590) == 3.14159
    assert decode_real(CFG, 18446744073707051616) == -2.5
    assert mask_to_word(2**64 + 5, CFG) == 5
    assert mask_to_word(12345, CFG) == 12345


def test_rounding_ties_away_from_zero():
    assert round_half_away(2.5) == 3
    assert round_half_away(-2.5) == -3
    assert round_half_away(0.49999) == 0
    assert round_half_away(-0.5) == -1
    with pytest.raises(EncodingError):
        round_half_away(float("nan"))
    with pytest.raises(EncodingError):
        round_half_away(float("inf"))


def test_overflow_refused():
    small = CodecConfig(n_max=1, word_bits=8)
    assert encode_int(small, 127) == 127
    assert encode_int(small, -128) == 128
    for k in (128, -129):
        with pytest.raises(EncodingError):
            encode_int(small, k)
    with pytest.raises(EncodingError):
        encode_real(CFG, 1e13)


def test_config_validation():
    with pytest.raises(ValueError):
        CodecConfig(n_max=0)
    with pytest.raises(ValueError):
        CodecConfig(word_bits=1)
    CFG.check_plaintext_space(66)
    with pytest.raises(EncodingError):
        CFG.check_plaintext_space(65)


def test_scale_weight_and_descale():
    assert scale_weight(CFG, 0.65) == 650000
    with pytest.raises(EncodingError):
        scale_weight(CFG, -0.1)
    assert descale(CFG, 7 * 10**18, 3) == 7.0


def exact_round(v, scale=10**6):
    # oracle: Fraction arithmetic, ties away from zero
    x = Fraction(v) * scale
    k = math.floor(abs(x) + Fraction(1, 2))
    return -k if x < 0 else k


@given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False))
def test_encoding_rounds_the_exact_product(v):
    k = to_signed(CFG, encode_real(CFG, v))
    assert k == exact_round(v)
    assert abs(Fraction(k) - Fraction(v) * 10**6) <= Fraction(1, 2)


@given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False))
def test_round_trip_bound(v):
    d = decode_real(CFG, encode_real(CFG, v))
    # half a quantum, plus the binary64 rounding of the decoded value itself
    assert abs(Fraction(d) - Fraction(v)) <= Fraction(1, 2 * 10**6) + Fraction(math.ulp(d)) / 2


def test_round_trip_bound_in_unit_range():
    rng = random.Random(11)
    for _ in range(20000):
        v = rng.uniform(-1.0, 1.0)
        assert abs(decode_real(CFG, encode_real(CFG, v)) - v) <= 5e-7


def test_scaled_round_ties():
    assert scaled_round(2.5, 1) == 3
    assert scaled_round(-2.5, 1) == -3
    # 0.0000005 * 10**6 is not exactly a tie in binary64; the exact product decides
    assert scaled_round(5e-7, 10**6) == exact_round(5e-7)
    with pytest.raises(EncodingError):
        scaled_round(float("nan"), 10)


@given(st.integers(min_value=-(2**63), max_value=2**63 - 1))
def test_signed_round_trip(k):
    assert to_signed(CFG, encode_int(CFG, k)) == k


def test_negative_difference_through_encryption(keys_by_bits):
    pk, sk = keys_by_bits(256)
    rng = random.Random(5)
    # oracle: plain arithmetic on the rounded integers
    for _ in range(500):
        a, b = rng.uniform(-1e3, 1e3), rng.uniform(-1e3, 1e3)
        w = rng.randrange(0, 10**6)
        ca = paillier.encrypt(pk, encode_real(CFG, a), rng)
        cb = paillier.encrypt(pk, encode_real(CFG, -b), rng)
        c = paillier.hom_scale(pk, paillier.hom_add(pk, ca, cb), w)
        got = to_signed(CFG, mask_to_word(paillier.decrypt(sk, pk, c), CFG))
        assert got == w * (exact_round(a) - exact_round(b))
        assert abs(descale(CFG, got, 1) - w * (a - b)) <= w / 1e6 + 1e-9 * abs(w * (a - b))
