"""Seeded randomness.

All draws go through numpy's ``Generator`` backed by PCG64. Independent
substreams are keyed by integer tuples, e.g. ``substream(seed, sample_id, 1)``,
so per-sample noise does not depend on batching or evaluation order.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "PCG64"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *key])))


def derive_seed(rng: np.random.Generator) -> int:
    """Draw a fresh 63-bit seed from ``rng`` (used to hand out child streams)."""
    return int(rng.integers(0, 2**63 - 1))
