import random

import pytest

from ppdo import paillier


@pytest.fixture(scope="session")
def toy_keys():
    return paillier.keys_from_primes(5, 7)


@pytest.fixture(scope="session")
def keys_by_bits():
    cache = {}

    def get(bits):
        if bits not in cache:
            cache[bits] = paillier.generate_keys(bits, random.Random(f"test-keys:{bits}"))
        return cache[bits]

    return get
