"""Seeded random streams.

Every random quantity in the simulator is drawn from a Philox stream keyed by
``(master_seed, purpose, *indices)``.  Streams for different keys are
independent, so trials and workers can be generated in any order.
"""
from __future__ import annotations

import numpy as np

# purpose tags for SeedSequence spawn keys
INSTANCE = 0
SCHEDULE_CAPS = 1
SCHEDULE_DRAWS = 2
SAMPLES = 3
NOISE_PROBE = 4


def stream(seed: int, *key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


def worker_streams(seed: int, trial: int, n: int) -> list[np.random.Generator]:
    """One sample stream per worker for the given trial."""
    return [stream(seed, SAMPLES, trial, i) for i in range(n)]


def fingerprint(rng: np.random.Generator) -> tuple:
    """Hashable summary of a Philox stream's key and counter."""
    state = rng.bit_generator.state["state"]
    return (tuple(int(x) for x in state["key"]), tuple(int(x) for x in state["counter"]))
