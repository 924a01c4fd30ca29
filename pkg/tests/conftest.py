"""Shared fixtures: compact configurations sized so unit runs stay fast."""

import pytest

from leosim.config import RunConfig, set_key, validate


def build_cfg(*pairs, seed: int = 0) -> RunConfig:
    """RunConfig from flat dotted overrides, validated."""
    cfg = RunConfig()
    cfg.seed = seed
    for key, value in pairs:
        set_key(cfg, key, value)
    return validate(cfg)


# 4x4 torus, two stations, two tiny batches: large enough to exercise
# every subsystem, small enough for sub-second engine runs
SMALL = (
    ("constellation.planes", 4),
    ("constellation.per_plane", 4),
    ("constellation.altitude_m", 1200e3),
    ("link.elevation_mask_deg", 0),
    ("traffic.mode", "stations"),
    ("traffic.stations", 2),
    ("traffic.tasks_per_batch", 2),
    ("traffic.batches", 2),
    ("traffic.size_mb_min", 5),
    ("traffic.size_mb_max", 10),
    ("regions.k", 2),
    ("ga.div.population", 4),
    ("ga.div.generations", 2),
    ("ga.route.population", 6),
    ("ga.route.generations", 3),
    ("routing.thres_d_ms", 1000),
)


@pytest.fixture
def small_cfg() -> RunConfig:
    return build_cfg(*SMALL)


def small_cfg_with(*pairs, seed: int = 0) -> RunConfig:
    return build_cfg(*SMALL, *pairs, seed=seed)
