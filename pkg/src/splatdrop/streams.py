"""Counter-based random streams.

Every source of randomness in the trainer is a Philox stream keyed by
(seed, purpose, iteration).  Streams are mutually independent and can be
regenerated at any time, so checkpoints never need to serialize RNG state
and replaying iteration k always draws the same numbers.
"""

import numpy as np

# Stable purpose ids; never renumber, checkpoints rely on replayability.
PURPOSES = {
    "init": 0,
    "dropout": 1,
    "split": 2,
    "views": 3,
    "scene": 4,
    "ensemble": 5,
    "densify": 6,
}


def stream(seed: int, purpose: str, iteration: int = 0) -> np.random.Generator:
    """Return a fresh Generator for the given (seed, purpose, iteration)."""
    key = np.uint64(seed) ^ (np.uint64(PURPOSES[purpose]) << np.uint64(56))
    bg = np.random.Philox(key=[np.uint64(key), np.uint64(0x5D0_CAFE)],
                          counter=[np.uint64(iteration), 0, 0, 0])
    return np.random.Generator(bg)
