"""Seeded random streams."""
import numpy as np

from .errors import ConfigError


def make_rng(seed, *stream):
    """Counter-based (Philox) generator keyed by ``seed`` and optional stream ids."""
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))
