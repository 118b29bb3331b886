import hashlib

import numpy as np


def label_key(label: str) -> int:
    """Stable 32-bit key for a label; independent of PYTHONHASHSEED."""
    return int.from_bytes(
        hashlib.blake2b(label.encode("utf-8"), digest_size=4).digest(), "little")


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """
    Module-local generator split from the run seed by label.

    Two different labels under one seed give independent streams; the same
    (seed, label) always gives the same stream.
    """
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFF, label_key(label)]))
