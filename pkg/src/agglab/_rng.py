"""Seeded, splittable random streams.

Every random draw in the package comes from a Philox (counter-based) bit
generator keyed by ``(seed, *path)``. Two calls with the same seed and path
produce the same stream regardless of call order or thread count.
"""

import os

import numpy as np

# Stream tags. Keep these stable: changing one changes every seeded output.
BAGS = 0
WEIGHTS = 1
NOISE = 2
NOISE_SET = 3
SPLIT = 4
SYNTH = 5
TRAIN = 6
AUDIT = 7
CHECK = 8

DEFAULT_SEED = 0


def default_seed():
    """Seed from ``AGGLAB_SEED`` if set, else 0."""
    value = os.environ.get("AGGLAB_SEED")
    return int(value) if value not in (None, "") else DEFAULT_SEED


def stream(seed, *path):
    """Return a Generator for the substream ``(seed, *path)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed, *path):
    """Derive a fresh 64-bit integer seed from ``(seed, *path)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
