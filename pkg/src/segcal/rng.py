"""Seedable random number generation.

Everything stochastic in this package draws from a PCG64 generator built
through ``make_rng``.  Pinning the bit generator (rather than relying on
``numpy.random.default_rng``) keeps every draw bit-reproducible across
numpy releases and platforms.
"""

from __future__ import annotations

import numpy as np


def make_rng(*seed_parts: int) -> np.random.Generator:
    """Build a PCG64 generator from one or more integer seed components.

    Multiple components are combined through ``SeedSequence``, which gives
    statistically independent streams for e.g. (salt, class_id) pairs.
    """
    if not seed_parts:
        raise ValueError("make_rng requires at least one seed component")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed_parts)))
