"""Named random streams derived from a single root seed."""

import hashlib

import numpy as np

STREAMS = ("data", "test", "partition", "selection", "init", "batching", "groups")


def derive_seed(root: int, name: str) -> int:
    """Stable 63-bit seed for stream ``name`` under ``root``."""
    digest = hashlib.sha256(f"{int(root)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def stream(root: int, name: str, *salt: int) -> np.random.Generator:
    """A numpy generator for ``name``, optionally salted by integers (task, round, ...)."""
    key = name if not salt else name + ":" + ":".join(str(int(s)) for s in salt)
    return np.random.default_rng(derive_seed(root, key))
