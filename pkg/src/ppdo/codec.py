"""Fixed-point encoding of reals into two's-complement plaintext slots.

A real ``v`` becomes ``round(v * n_max)`` stored as an unsigned
``word_bits``-wide two's-complement word. Homomorphic sums and scalings
are done modulo the Paillier modulus; after decryption the bits above the
word are discarded and the word is read back as signed.

In the neighbor exchange the weight ``b`` is scaled by ``n_max`` as well,
so a recovered term ``b_i * b_j * (x_j - x_i)`` carries a total scale of
``n_max**3``: one factor from the state, one from each weight. All of that
descaling happens at the receiving agent (see :func:`descale`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    n_max: int = 10**6
    word_bits: int = 64

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if self.word_bits < 2:
            raise ValueError(f"word_bits must be >= 2, got {self.word_bits}")

    @property
    def modulus(self) -> int:
        return 1 << self.word_bits

    @property
    def max_magnitude(self) -> int:
        return 1 << (self.word_bits - 1)

    def check_plaintext_space(self, key_bits: int) -> None:
        if self.word_bits > key_bits - 2:
            raise EncodingError(
                f"word of {self.word_bits} bits does not fit a {key_bits}-bit plaintext space")


def round_half_away(v: float) -> int:
    """Round to nearest integer, ties away from zero."""
    if not math.isfinite(v):
        raise EncodingError(f"cannot encode non-finite value {v!r}")
    r = math.floor(abs(v) + 0.5)
    return -r if v < 0 else r


def encode_int(cfg: CodecConfig, k: int) -> int:
    """Two's-complement word for a signed integer; refuses to wrap."""
    if not -cfg.max_magnitude <= k < cfg.max_magnitude:
        raise EncodingError(f"{k} overflows a signed {cfg.word_bits}-bit word")
    return k % cfg.modulus


def scaled_round(v: float, scale: int) -> int:
    """``round(v * scale)`` of the exact product, ties away from zero.

    The float product ``v * scale`` can itself round across a tie; integer
    arithmetic on ``v.as_integer_ratio()`` cannot.
    """
    if not math.isfinite(v):
        raise EncodingError(f"cannot encode non-finite value {v!r}")
    num, den = float(v).as_integer_ratio()
    k = (2 * abs(num) * scale + den) // (2 * den)
    return -k if num < 0 else k


def encode_real(cfg: CodecConfig, v: float) -> int:
    return encode_int(cfg, scaled_round(v, cfg.n_max))


def to_signed(cfg: CodecConfig, slot: int) -> int:
    slot %= cfg.modulus
    return slot - cfg.modulus if slot >= cfg.max_magnitude else slot


def decode_real(cfg: CodecConfig, slot: int) -> float:
    return to_signed(cfg, slot) / cfg.n_max


def mask_to_word(raw_plaintext: int, cfg: CodecConfig) -> int:
    return raw_plaintext % cfg.modulus


def scale_weight(cfg: CodecConfig, b: float) -> int:
    """Integer form of a nonnegative weight, used as a homomorphic exponent."""
    if b < 0:
        raise EncodingError(f"weights must be nonnegative, got {b}")
    return scaled_round(b, cfg.n_max)


def descale(cfg: CodecConfig, value: int, power: int) -> float:
    """Divide an integer carrying ``n_max**power`` scale back to a real."""
    return value / cfg.n_max**power
