"""Textbook Paillier cryptosystem over Python integers.

Keys use the simplified generator ``g = n + 1``, so ``lambda = phi(n)`` and
``mu = phi(n)^-1 mod n``. Ciphertexts are bare integers in ``Z*_{n^2}``;
they carry no key fingerprint, so pairing a ciphertext with the right key
is the caller's job.
"""
from __future__ import annotations

import math
import secrets
from dataclasses import dataclass, field

MILLER_RABIN_ROUNDS = 64
DEFAULT_KEY_BITS = 256

_SMALL_PRIMES = (
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71,
    73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151,
)


class PaillierError(Exception):
    pass


class KeyGenerationError(PaillierError):
    pass


class PaillierDomainError(PaillierError, ValueError):
    pass


class MalformedCiphertextError(PaillierError, ValueError):
    pass


@dataclass(frozen=True)
class PublicKey:
    n: int
    g: int = field(init=False)
    n_squared: int = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 2:
            raise PaillierDomainError(f"modulus must be > 1, got {self.n}")
        object.__setattr__(self, "g", self.n + 1)
        object.__setattr__(self, "n_squared", self.n * self.n)

    @property
    def bits(self) -> int:
        return self.n.bit_length()


@dataclass(frozen=True, repr=False)
class PrivateKey:
    lam: int
    mu: int

    def __repr__(self):
        # never echo secret material into logs
        return "PrivateKey(<hidden>)"


@dataclass(frozen=True)
class Ciphertext:
    value: int


def _default_rng():
    return secrets.SystemRandom()


def is_probable_prime(candidate: int, rng=None, rounds: int = MILLER_RABIN_ROUNDS) -> bool:
    """Miller-Rabin test with ``rounds`` random bases."""
    if candidate < 2:
        return False
    if candidate in (2, 3):
        return True
    if candidate % 2 == 0:
        return False
    for p in _SMALL_PRIMES:
        if candidate == p:
            return True
        if candidate % p == 0:
            return False
    rng = rng or _default_rng()
    d, s = candidate - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(rounds):
        a = rng.randrange(2, candidate - 1)
        x = pow(a, d, candidate)
        if x in (1, candidate - 1):
            continue
        for _ in range(s - 1):
            x = pow(x, 2, candidate)
            if x == candidate - 1:
                break
        else:
            return False
    return True


def random_prime(bits: int, rng=None, max_attempts: int = 100_000) -> int:
    """Random prime with exactly ``bits`` bits and the top two bits set.

    Setting the two top bits guarantees the product of two such primes has
    exactly ``2 * bits`` bits.
    """
    if bits < 3:
        raise KeyGenerationError(f"prime size too small: {bits} bits")
    rng = rng or _default_rng()
    top = (1 << (bits - 1)) | (1 << (bits - 2))
    for _ in range(max_attempts):
        candidate = rng.getrandbits(bits) | top | 1
        if is_probable_prime(candidate, rng):
            return candidate
    raise KeyGenerationError(f"no {bits}-bit prime found in {max_attempts} draws")


def keys_from_primes(p: int, q: int) -> tuple[PublicKey, PrivateKey]:
    """Build a key pair from explicit primes; the primes are not retained."""
    if p == q:
        raise KeyGenerationError("p and q must differ")
    n = p * q
    phi = (p - 1) * (q - 1)
    if math.gcd(n, phi) != 1:
        raise KeyGenerationError("gcd(n, phi(n)) != 1")
    mu = pow(phi, -1, n)
    return PublicKey(n), PrivateKey(phi, mu)


def generate_keys(bit_length: int = DEFAULT_KEY_BITS, rng=None,
                  max_attempts: int = 64) -> tuple[PublicKey, PrivateKey]:
    """Generate a key pair whose modulus has exactly ``bit_length`` bits.

    ``rng`` must offer ``getrandbits`` and ``randrange`` (``random.Random``
    or ``secrets.SystemRandom``). A seeded ``random.Random`` makes key
    generation reproducible, which is what the simulator relies on; it is
    not a cryptographic source.
    """
    if bit_length < 16 or bit_length % 2:
        raise PaillierDomainError(f"bit_length must be even and >= 16, got {bit_length}")
    rng = rng or _default_rng()
    half = bit_length // 2
    for _ in range(max_attempts):
        p = random_prime(half, rng)
        q = random_prime(half, rng)
        if p == q:
            continue
        try:
            pk, sk = keys_from_primes(p, q)
        except KeyGenerationError:
            continue
        if pk.bits == bit_length:
            return pk, sk
    raise KeyGenerationError(f"key generation failed after {max_attempts} attempts")


def _sample_unit(n: int, rng) -> int:
    while True:
        r = rng.randrange(1, n)
        if math.gcd(r, n) == 1:
            return r


def _raw_encrypt(pk: PublicKey, m: int, r: int) -> Ciphertext:
    # test-only entry point: the nonce is injected instead of sampled
    if not 0 <= m < pk.n:
        raise PaillierDomainError(f"plaintext outside Z_n: {m}")
    nsq = pk.n_squared
    # g^m = (1 + n)^m = 1 + m*n  (mod n^2)
    gm = (1 + m * pk.n) % nsq
    return Ciphertext(gm * pow(r, pk.n, nsq) % nsq)


def encrypt(pk: PublicKey, m: int, rng=None) -> Ciphertext:
    """Encrypt ``m`` in ``[0, n)`` with a fresh nonce from ``rng``."""
    rng = rng or _default_rng()
    return _raw_encrypt(pk, m, _sample_unit(pk.n, rng))


def _check_ciphertext(pk: PublicKey, c: Ciphertext) -> int:
    v = c.value
    if not 0 < v < pk.n_squared or math.gcd(v, pk.n_squared) != 1:
        raise MalformedCiphertextError("ciphertext is not a unit modulo n^2")
    return v


def decrypt(sk: PrivateKey, pk: PublicKey, c: Ciphertext) -> int:
    v = _check_ciphertext(pk, c)
    u = pow(v, sk.lam, pk.n_squared)
    return (u - 1) // pk.n * sk.mu % pk.n


def hom_add(pk: PublicKey, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    """Ciphertext of ``m1 + m2 mod n``."""
    return Ciphertext(c1.value * c2.value % pk.n_squared)


def hom_scale(pk: PublicKey, c: Ciphertext, k: int) -> Ciphertext:
    """Ciphertext of ``k * m mod n``; ``k = 0`` yields the trivial encryption of 0."""
    if not 0 <= k < pk.n:
        raise PaillierDomainError(f"scalar outside [0, n): {k}")
    return Ciphertext(pow(c.value, k, pk.n_squared))
