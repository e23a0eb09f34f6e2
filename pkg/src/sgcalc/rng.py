"""Seeded random substreams derived by labeled hashing."""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for ``label``; identical for identical (seed, label)."""
    h = int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, h])


def random_fields(space, rng: np.random.Generator, count: int, family: str = "white",
                  mean_zero: bool = False) -> np.ndarray:
    """``(n, count)`` random fields.

    ``white``: i.i.d. normal values; ``sign``: i.i.d. +-1; ``uniform``:
    uniform on [-1, 1].  With ``mean_zero`` the measure-weighted mean is removed.
    """
    n = space.n
    if family == "white":
        F = rng.standard_normal((n, count))
    elif family == "sign":
        F = rng.choice([-1.0, 1.0], size=(n, count))
    elif family == "uniform":
        F = rng.uniform(-1.0, 1.0, size=(n, count))
    else:
        raise ValueError(f"unknown field family {family!r}")
    if mean_zero:
        F = F - (space.measure @ F / space.total_mass)[None, :]
    return F
