"""Deterministic seed substreams.

Every randomized component draws from its own labeled substream so that
adding draws to one component never perturbs another. Substreams are
derived by hashing (seed, label); Python's builtin ``hash`` is salted per
process and must not be used here.
"""

from __future__ import annotations

import hashlib
from random import Random


def child_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def substream(seed: int, label: str) -> Random:
    """A ``random.Random`` seeded from (seed, label), stable across runs and platforms."""
    return Random(child_seed(seed, label))
