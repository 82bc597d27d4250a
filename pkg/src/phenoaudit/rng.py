"""Deterministic random-stream derivation.

All randomness in the pipeline flows from one 64-bit master seed. Subsystems
never share a generator: each draws from a stream derived by hashing the
master seed together with a string path (e.g. ``("cohort", "patient", 17)``).
Derived streams are therefore order-independent: generating patients in
parallel or in a different order cannot change any patient's draws.

Determinism is guaranteed within this implementation only; no cross-language
bit compatibility is promised.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(master_seed: int, *path: object) -> int:
    """Hash (master_seed, path...) into a 64-bit child seed."""
    text = ":".join([str(master_seed & _MASK64)] + [str(p) for p in path])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(master_seed: int, *path: object) -> np.random.Generator:
    """Return an independent PCG64 generator for the given stream path."""
    return np.random.default_rng(derive_seed(master_seed, *path))


def derive_token(master_seed: int, *path: object, nbytes: int = 6) -> str:
    """Opaque hex token, stable for a given (seed, path)."""
    text = ":".join([str(master_seed & _MASK64)] + [str(p) for p in path])
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[: nbytes * 2]
