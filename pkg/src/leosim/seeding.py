"""Seed derivation. Every stochastic component draws from rng_for(master, tag, ...),
so two runs with the same master seed replay bit-identically regardless of the
order in which components are constructed."""

from __future__ import annotations

import numpy as np

# purpose tags, one space per consumer
TAG_STATIONS = 100
TAG_BATCH = 101
TAG_TASK_SIZES = 102
TAG_ROUTE_GA = 200
TAG_ROUTE_RSH = 201
TAG_DIV_GA = 210
TAG_OU = 300
TAG_NN_INIT = 310
TAG_REPLAY = 320
TAG_POLICY = 330
TAG_SCRATCH = 400
TAG_FADING = 410


def rng_for(master_seed: int, *tags: int) -> np.random.Generator:
    """Independent generator for (master seed, purpose, instance...)."""
    return np.random.default_rng([int(master_seed)] + [int(t) for t in tags])
