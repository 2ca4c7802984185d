"""Named random substreams derived from one master seed.

Every consumer of randomness (scenario noise, demand sampling, policy
sampling, detour coins, ...) pulls its own substream by label, so toggling
one feature never perturbs the draws seen by another.
"""

from __future__ import annotations

import hashlib
import random

import numpy as np


def derive_seed(master: int, *labels) -> int:
    """Stable 64-bit child seed for (master, labels). Not Python hash()."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "big")


def substream(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))


def pystream(master: int, *labels) -> random.Random:
    return random.Random(derive_seed(master, *labels))
