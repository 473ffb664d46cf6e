# app/core/seeding.py
"""
Named random sub-streams derived from a single root seed.

Each stage asks for its own stream so it can be re-run in isolation and
still draw exactly what it drew inside a full pipeline.
"""
from typing import Dict

import numpy as np

STREAMS: Dict[str, int] = {
    "data": 1,
    "init": 2,
    "augment": 3,
    "search": 4,
    "stack": 5,
    "train": 6,
}


def derive_seed(root: int, stream: str, *indices: int) -> int:
    """A 32-bit seed for `stream`, optionally specialised by indices (seed index, trial, ...)."""
    if stream not in STREAMS:
        raise KeyError(f"Unknown seed stream '{stream}'")
    entropy = [int(root), STREAMS[stream], *(int(i) for i in indices)]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint32)[0])
