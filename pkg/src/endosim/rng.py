"""Seeded, explicitly-threaded randomness.

Machine states carry an opaque generator state so every transition that draws
randomness is a pure function of (state, inputs).
"""
from __future__ import annotations

import random

RngState = tuple


def seed_state(seed: int) -> RngState:
    return random.Random(seed).getstate()


def draw_below(state: RngState, n: int) -> tuple[int, RngState]:
    """Uniform draw from [0, n) advancing the generator state."""
    r = random.Random()
    r.setstate(state)
    value = r.randrange(n)
    return value, r.getstate()
