# randomness.py
import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key(k: Key) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    if k < 0:
        raise ValueError(f"stream keys must be nonnegative, got {k}")
    return int(k)


def derive_rng(seed: int, *keys: Key) -> np.random.Generator:
    """Counter-based stream for (seed, key, key, ...).

    Keys are path components such as ("observed",) or ("trace", "vb", "kl");
    strings are hashed, so the same path always yields the same stream and
    different paths never share state.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def seed_int(rng: np.random.Generator) -> int:
    # for libraries that only take an integer random_state
    return int(rng.integers(0, 2**31 - 1))
