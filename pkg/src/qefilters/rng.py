"""Seeded random number generation.

Every stochastic routine in the package draws from numpy's Philox engine, a
published counter-based 64-bit generator. A given integer seed therefore
reproduces the same stream bit-for-bit on every platform, and streams built
from distinct key tuples are statistically independent, which is what the
synthetic generator relies on for its per-image substreams.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError


def make_generator(*key: int) -> np.random.Generator:
    """Return a Philox-backed generator keyed by one or more integers."""
    for part in key:
        if int(part) != part or part < 0:
            raise ConfigurationError(f"seed components must be non-negative integers, got {part}")
    seq = np.random.SeedSequence([int(part) for part in key])
    return np.random.Generator(np.random.Philox(seq))
