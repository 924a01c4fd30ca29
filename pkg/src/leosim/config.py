"""Run configuration: dataclasses per subsystem, flat dotted-key schema, YAML loading."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

DIVISION_KINDS = ("DDRO", "QTRD", "GRD", "NRD")
ROUTING_KINDS = ("GA", "CRP", "ORP", "RSH")
POLICY_KINDS = ("MADDPG", "DDPG", "DQN", "TRLA", "ROLA")
PREDICTOR_KINDS = ("ewma", "rnn")
TRAFFIC_MODES = ("stations", "sources")


class ConfigError(ValueError):
    """Invalid, unknown, or out-of-range configuration key."""


@dataclass
class ConstellationConfig:
    planes: int = 8
    per_plane: int = 8
    altitude_m: float = 550e3
    inclination_deg: float = 90.0
    f_max_cycles: float = 5e11
    r_max_bps: float = 1e9
    energy_j: float = 1e12
    seam_links_off: bool = False


@dataclass
class LinkConfig:
    # inter-satellite channel constants
    bandwidth_hz: float = 1e8
    tx_power_w: float = 10.0
    antenna_gain: float = 1e4
    pointing_loss: float = 0.9
    noise_temp_k: float = 290.0
    # ground-to-satellite channel constants
    uplink_bandwidth_hz: float = 1e6
    uplink_power_w: float = 10.0
    uplink_noise_w: float = 4.004e-15
    carrier_hz: float = 20e9
    elevation_mask_deg: float = 10.0
    fading: str = "none"  # "none" | "lognormal"
    fading_sigma: float = 0.3


@dataclass
class TrafficConfig:
    mode: str = "stations"
    stations: int = 100
    sources: int = 5
    tasks_per_batch: int = 10
    batches: int = 10
    size_mb_min: float = 100.0
    size_mb_max: float = 600.0
    stations_csv: str = ""


@dataclass
class PredictorConfig:
    kind: str = "ewma"
    alpha: float = 0.5
    min_history: int = 8


@dataclass
class RegionsConfig:
    k: int = 5
    thr_tfr: float = 0.2
    delay_factor: float = 2.0
    qtrd_split_threshold: float = 0.25


@dataclass
class GaDivConfig:
    population: int = 20
    generations: int = 30
    crossover: float = 0.8
    mutation: float = 0.1
    elites: int = 2


@dataclass
class GaRouteConfig:
    population: int = 20
    generations: int = 25
    crossover: float = 0.8
    mutation: float = 0.3
    elites: int = 2
    # reduced budget for scratch simulations inside division fitness
    scratch_population: int = 8
    scratch_generations: int = 6


@dataclass
class RoutingConfig:
    kind: str = "GA"
    thres_d_ms: float = 50.0
    max_replans: int = 10
    hop_cap_factor: float = 2.0
    dst_mode: str = "k_hops"  # "k_hops" | "random"
    allow_cross_region: bool = True
    cross_region_gap: float = 0.4


@dataclass
class NnConfig:
    actor_hidden: tuple[int, ...] = (64, 64)
    critic_hidden: tuple[int, ...] = (128, 64)
    seed: int = 0


@dataclass
class MaddpgConfig:
    agents: int = 5
    gamma: float = 0.98
    tau: float = 0.01
    buffer: int = 1000
    batch: int = 64
    ou_sigma: float = 0.5
    ou_theta: float = 0.15
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    warmup: int = 256
    train_start: int = 0
    policy_delay: int = 1


@dataclass
class RewardConfig:
    R_const: float = 10.0
    rho: float = 1.0
    omega: float = 1.0


@dataclass
class PolicyConfig:
    kind: str = "MADDPG"
    checkpoint: str = ""
    dqn_epsilon: float = 0.1
    dqn_actions_cap: int = 256


@dataclass
class DivisionConfig:
    kind: str = "DDRO"


@dataclass
class EngineConfig:
    round_s: float = 1.0
    task_budget_s: float = 5.0
    eta_cycles_per_byte: float = 1000.0
    kappa0: float = 1e-26


@dataclass
class TrainConfig:
    steps: int = 2000
    episodes: int = 0  # 0: derive from steps


@dataclass
class SweepConfig:
    variable: str = ""
    values: tuple = ()


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    constellation: ConstellationConfig = field(default_factory=ConstellationConfig)
    link: LinkConfig = field(default_factory=LinkConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    regions: RegionsConfig = field(default_factory=RegionsConfig)
    ga_div: GaDivConfig = field(default_factory=GaDivConfig)
    ga_route: GaRouteConfig = field(default_factory=GaRouteConfig)
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    nn: NnConfig = field(default_factory=NnConfig)
    maddpg: MaddpgConfig = field(default_factory=MaddpgConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    division: DivisionConfig = field(default_factory=DivisionConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


# flat dotted key -> (dataclass attribute path). "ga.div.*" and "ga.route.*"
# keep the documented key spelling while mapping onto ga_div / ga_route.
_GROUP_ATTRS = {
    "constellation": "constellation",
    "link": "link",
    "traffic": "traffic",
    "predictor": "predictor",
    "regions": "regions",
    "ga.div": "ga_div",
    "ga.route": "ga_route",
    "routing": "routing",
    "nn": "nn",
    "maddpg": "maddpg",
    "reward": "reward",
    "policy": "policy",
    "division": "division",
    "engine": "engine",
    "train": "train",
    "sweep": "sweep",
}

_TOP_KEYS = {"seed", "output_dir"}

_CHOICE_KEYS = {
    "division.kind": DIVISION_KINDS,
    "routing.kind": ROUTING_KINDS,
    "policy.kind": POLICY_KINDS,
    "predictor.kind": PREDICTOR_KINDS,
    "traffic.mode": TRAFFIC_MODES,
    "link.fading": ("none", "lognormal"),
    "routing.dst_mode": ("k_hops", "random"),
}


def _split_key(key: str) -> tuple[str, str]:
    for group in sorted(_GROUP_ATTRS, key=len, reverse=True):
        if key.startswith(group + "."):
            return _GROUP_ATTRS[group], key[len(group) + 1:]
    raise ConfigError(f"unknown config key: {key!r}")


def schema_keys() -> list[str]:
    """Every accepted flat dotted key, sorted."""
    keys = sorted(_TOP_KEYS)
    for group, attr in _GROUP_ATTRS.items():
        sub = RunConfig.__dataclass_fields__[attr].default_factory()
        keys.extend(f"{group}.{f.name}" for f in fields(sub))
    return sorted(keys)


def _coerce(key: str, current, value):
    if key in _CHOICE_KEYS:
        value = str(value)
        if key in ("division.kind", "routing.kind", "policy.kind"):
            value = value.upper()
        if key in ("predictor.kind", "traffic.mode", "link.fading", "routing.dst_mode"):
            value = value.lower()
        if value not in _CHOICE_KEYS[key]:
            raise ConfigError(f"{key}: {value!r} not in {_CHOICE_KEYS[key]}")
        return value
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(current, int) and not isinstance(current, bool):
        iv = int(value)
        if float(iv) != float(value):
            raise ConfigError(f"{key}: expected integer, got {value!r}")
        return iv
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        try:
            return tuple(int(v) if float(v) == int(float(v)) else float(v) for v in value)
        except (TypeError, ValueError):
            return tuple(value)
    if isinstance(current, str):
        return str(value)
    return value


def set_key(cfg: RunConfig, key: str, value) -> None:
    """Apply one flat dotted key, validating name and type."""
    if key in _TOP_KEYS:
        setattr(cfg, key, _coerce(key, getattr(cfg, key), value))
        return
    attr, leaf = _split_key(key)
    sub = getattr(cfg, attr)
    if leaf not in {f.name for f in fields(sub)}:
        raise ConfigError(f"unknown config key: {key!r}")
    setattr(sub, leaf, _coerce(key, getattr(sub, leaf), value))


def validate(cfg: RunConfig) -> RunConfig:
    c = cfg.constellation
    if c.planes < 2 or c.per_plane < 2:
        raise ConfigError("constellation.planes and per_plane must both be >= 2")
    if cfg.regions.k < 1:
        raise ConfigError("regions.k must be >= 1")
    if cfg.ga_div.population < 4 or cfg.ga_div.generations < 1:
        raise ConfigError("ga.div requires population >= 4 and generations >= 1")
    if not (0.0 < cfg.maddpg.tau <= 1.0):
        raise ConfigError("maddpg.tau must be in (0, 1]")
    if not (0.0 <= cfg.maddpg.gamma < 1.0):
        raise ConfigError("maddpg.gamma must be in [0, 1)")
    if cfg.traffic.size_mb_min <= 0 or cfg.traffic.size_mb_max < cfg.traffic.size_mb_min:
        raise ConfigError("traffic size bounds must satisfy 0 < min <= max")
    if cfg.engine.round_s <= 0 or cfg.engine.task_budget_s <= 0:
        raise ConfigError("engine.round_s and engine.task_budget_s must be positive")
    return cfg


def from_flat(items: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in items.items():
        set_key(cfg, str(key), value)
    return validate(cfg)


def load_config(path: str | Path) -> RunConfig:
    """Load a YAML file of flat dotted keys; unknown keys are rejected."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping of dotted keys")
    flat = {}
    for key, value in raw.items():
        if isinstance(value, dict):  # nested form also accepted
            for leaf, v in _flatten(value, str(key)):
                flat[leaf] = v
        else:
            flat[str(key)] = value
    return from_flat(flat)


def _flatten(d: dict, prefix: str):
    for k, v in d.items():
        key = f"{prefix}.{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key)
        else:
            yield key, v


def to_flat_dict(cfg: RunConfig) -> dict:
    """Echo the full config as flat dotted keys (manifest payload)."""
    out = {k: getattr(cfg, k) for k in sorted(_TOP_KEYS)}
    for group, attr in _GROUP_ATTRS.items():
        sub = getattr(cfg, attr)
        for f in fields(sub):
            v = getattr(sub, f.name)
            out[f"{group}.{f.name}"] = list(v) if isinstance(v, tuple) else v
    return dict(sorted(out.items()))


def clone_config(cfg: RunConfig) -> RunConfig:
    return dataclasses.replace(
        cfg,
        **{
            attr: dataclasses.replace(getattr(cfg, attr))
            for attr in _GROUP_ATTRS.values()
        },
    )
