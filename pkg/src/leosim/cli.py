"""Command-line front end: single runs, training, method comparisons, and
parameter sweeps, all emitting deterministic CSV artifacts plus a manifest
that pins the exact configuration."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, clone_config, load_config, set_key, to_flat_dict, validate
from .constellation import Constellation
from .engine import Engine, MetricsSnapshot, write_metrics_csv
from .neuralnet import load_checkpoint, save_checkpoint
from .regions import RegionMap


class MismatchedTrafficError(ConfigError):
    """compare requires every method to share seed and traffic keys."""


TRAINABLE = {"MADDPG", "DDPG", "DQN"}


# -- artifact writers -----------------------------------------------------------------


def write_region_map_csv(map_: RegionMap, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sat_id", "region_id"])
        for sat in range(map_.n_sats):
            w.writerow([sat, int(map_.region_of[sat])])


def write_topology_csv(world: Constellation, path: Path) -> None:
    pos = world.positions()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sat_id", "plane", "slot", "x", "y", "z"])
        for sat in range(world.n_sats):
            w.writerow(
                [
                    sat,
                    world.plane_of(sat),
                    world.slot_of(sat),
                    f"{pos[sat, 0]:.10g}",
                    f"{pos[sat, 1]:.10g}",
                    f"{pos[sat, 2]:.10g}",
                ]
            )


def write_route_trace_csv(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["task_id", "subtask_k", "hop_index", "sat_id", "predicted_delay_ms", "replanned"]
        )
        for r in rows:
            w.writerow(
                [
                    r.task_id,
                    r.subtask_k,
                    r.hop_index,
                    r.sat_id,
                    f"{r.predicted_delay_ms:.10g}",
                    "true" if r.replanned else "false",
                ]
            )


def write_training_log_csv(logs: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "agent", "critic_loss", "mean_q", "episode_reward"])
        for e in logs:
            w.writerow(
                [
                    e["step"],
                    e["agent"],
                    f"{e['critic_loss']:.10g}",
                    f"{e['mean_q']:.10g}",
                    f"{e['episode_reward']:.10g}",
                ]
            )


def write_manifest(cfg: RunConfig, path: Path) -> None:
    flat = to_flat_dict(cfg)
    blob = json.dumps(flat, sort_keys=True).encode()
    manifest = {
        "version": __version__,
        "seed": cfg.seed,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "config": flat,
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- config assembly -----------------------------------------------------------------


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = int(args.seed)
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    for flag, key in (("policy", "policy.kind"), ("division", "division.kind"),
                      ("routing", "routing.kind")):
        value = getattr(args, flag, None)
        if value:
            set_key(cfg, key, value)
    validate(cfg)
    return cfg


def _aggregate(snaps: list[MetricsSnapshot]) -> dict:
    """Collapse per-batch rows into one sweep-point row."""
    if not snaps:
        return {
            "avg_delay_ms": 0.0, "completion_rate": 1.0, "avg_energy_j": 0.0,
            "max_region_variance": 0.0, "replans": 0, "drops": 0,
        }
    done = sum(s.n_completed for s in snaps)
    total = sum(s.n_tasks for s in snaps)
    delay = (
        sum(s.avg_delay_s * s.n_completed for s in snaps) / done if done else 0.0
    )
    energy = (
        sum(s.avg_energy_j * s.n_completed for s in snaps) / done if done else 0.0
    )
    return {
        "avg_delay_ms": delay * 1000.0,
        "completion_rate": (done / total) if total else 1.0,
        "avg_energy_j": energy,
        "max_region_variance": max(s.max_region_variance for s in snaps),
        "replans": sum(s.replans for s in snaps),
        "drops": sum(s.drops for s in snaps),
    }


def _run_once(cfg: RunConfig) -> tuple[Engine, list[MetricsSnapshot]]:
    engine = Engine(cfg, trace=True)
    if cfg.policy.checkpoint and hasattr(engine.policy, "load_networks"):
        nets, _ = load_checkpoint(cfg.policy.checkpoint)
        engine.policy.load_networks(nets)
    snaps = engine.run()
    return engine, snaps


# -- subcommands -----------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    engine, snaps = _run_once(cfg)
    write_metrics_csv(snaps, out / "metrics.csv")
    write_manifest(cfg, out / "manifest.json")
    write_region_map_csv(engine.map, out / "region_map.csv")
    write_topology_csv(engine.world, out / "topology.csv")
    write_route_trace_csv(engine.trace_rows, out / "route_trace.csv")
    agg = _aggregate(snaps)
    print(
        f"run complete: {len(snaps)} batches, completion {agg['completion_rate']:.4f}, "
        f"avg delay {agg['avg_delay_ms']:.2f} ms -> {out / 'metrics.csv'}"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    if cfg.policy.kind not in TRAINABLE:
        raise ConfigError(f"policy.kind {cfg.policy.kind!r} is not trainable")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    engine = Engine(cfg)
    start_step = 0
    if cfg.policy.checkpoint:
        nets, meta = load_checkpoint(cfg.policy.checkpoint)
        engine.policy.load_networks(nets)
        start_step = int(float(meta.get("step", 0)))

    best = {"reward": -np.inf, "nets": None, "step": start_step}

    def snapshot_best(entry: dict) -> None:
        if entry["episode_reward"] > best["reward"]:
            best["reward"] = entry["episode_reward"]
            best["nets"] = {n: m.clone() for n, m in engine.policy.networks().items()}
            best["step"] = entry["step"]

    steps = max(cfg.train.steps, start_step)
    logs = engine.train(steps, log_cb=snapshot_best, start_step=start_step)
    final_step = logs[-1]["step"] if logs else start_step
    meta = {"kind": cfg.policy.kind, "step": final_step}
    save_checkpoint(engine.policy.networks(), out / "checkpoint_last.txt", meta)
    if best["nets"] is None:
        best["nets"] = engine.policy.networks()
        best["reward"] = 0.0
    save_checkpoint(
        best["nets"],
        out / "checkpoint_best.txt",
        {"kind": cfg.policy.kind, "step": best["step"], "best_reward": best["reward"]},
    )
    write_training_log_csv(logs, out / "training_log.csv")
    write_manifest(cfg, out / "manifest.json")
    print(
        f"train complete: {final_step} steps, best reward {best['reward']:.4f} "
        f"-> {out / 'checkpoint_best.txt'}"
    )
    return 0


def _sweep_values(cfg: RunConfig, args: argparse.Namespace) -> tuple[str, list[float]]:
    if getattr(args, "sizes", None):
        return "traffic.size_mb", [float(v) for v in args.sizes.split(",")]
    if cfg.sweep.variable and cfg.sweep.values:
        return cfg.sweep.variable, [float(v) for v in cfg.sweep.values]
    return "traffic.size_mb", [100.0, 200.0, 300.0, 400.0, 500.0, 600.0]


def _apply_sweep_value(cfg: RunConfig, variable: str, value: float) -> None:
    if variable == "traffic.size_mb":
        # fixed task size at the sweep point, the figure families' x-axis
        set_key(cfg, "traffic.size_mb_min", value)
        set_key(cfg, "traffic.size_mb_max", value)
    else:
        set_key(cfg, variable, value)


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    variable, values = _sweep_values(cfg, args)
    rows = []
    for v in values:
        cfg_i = clone_config(cfg)
        _apply_sweep_value(cfg_i, variable, v)
        validate(cfg_i)
        _, snaps = _run_once(cfg_i)
        agg = _aggregate(snaps)
        rows.append((v, agg))
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "value", "policy", "division", "routing", "avg_delay_ms",
                "completion_rate", "avg_energy_j", "max_region_variance",
                "replans", "drops",
            ]
        )
        for v, agg in rows:
            w.writerow(
                [
                    f"{v:.10g}", cfg.policy.kind, cfg.division.kind, cfg.routing.kind,
                    f"{agg['avg_delay_ms']:.10g}", f"{agg['completion_rate']:.10g}",
                    f"{agg['avg_energy_j']:.10g}", f"{agg['max_region_variance']:.10g}",
                    agg["replans"], agg["drops"],
                ]
            )
    write_manifest(cfg, out / "manifest.json")
    print(f"sweep complete: {len(rows)} points over {variable} -> {out / 'sweep.csv'}")
    return 0


_TRAFFIC_KEYS_PREFIX = ("traffic.", "constellation.", "link.")


def _traffic_signature(cfg: RunConfig) -> dict:
    flat = to_flat_dict(cfg)
    sig = {k: v for k, v in flat.items() if k.startswith(_TRAFFIC_KEYS_PREFIX)}
    sig["seed"] = cfg.seed
    return sig


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    axis = args.axis
    axis_key = {"division": "division.kind", "routing": "routing.kind",
                "policy": "policy.kind"}[axis]
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    else:
        methods = {"division": ["DDRO", "QTRD", "GRD", "NRD"],
                   "routing": ["GA", "CRP", "ORP", "RSH"],
                   "policy": ["MADDPG", "DDPG", "DQN", "TRLA", "ROLA"]}[axis]
    if len(methods) < 2:
        raise ConfigError("compare needs at least 2 methods")

    variable, values = _sweep_values(cfg, args)
    configs = {}
    for m in methods:
        cfg_m = clone_config(cfg)
        set_key(cfg_m, axis_key, m)
        validate(cfg_m)
        configs[m] = cfg_m
    base_sig = _traffic_signature(configs[methods[0]])
    for m, cfg_m in configs.items():
        if _traffic_signature(cfg_m) != base_sig:
            raise MismatchedTrafficError(
                f"method {m} diverges on seed/traffic keys; compare requires shared traffic"
            )

    metrics = ["avg_delay_ms", "completion_rate", "avg_energy_j", "max_region_variance"]
    table: dict[float, dict[str, dict]] = {}
    for m in methods:
        for v in values:
            cfg_i = clone_config(configs[m])
            _apply_sweep_value(cfg_i, variable, v)
            validate(cfg_i)
            _, snaps = _run_once(cfg_i)
            table.setdefault(v, {})[m] = _aggregate(snaps)

    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["value"]
        for m in methods:
            header.extend(f"{m}_{metric}" for metric in metrics)
        w.writerow(header)
        for v in values:
            row = [f"{v:.10g}"]
            for m in methods:
                row.extend(f"{table[v][m][metric]:.10g}" for metric in metrics)
            w.writerow(row)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = {
        "avg_delay_ms": "Average delay (ms)",
        "completion_rate": "Completion rate",
        "avg_energy_j": "Average energy (J)",
        "max_region_variance": "Max resource usage variance",
    }
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(6, 4))
        for m in methods:
            ax.plot(values, [table[v][m][metric] for v in values], marker="o", label=m)
        ax.set_xlabel("Task size (MB)" if variable == "traffic.size_mb" else variable)
        ax.set_ylabel(labels[metric])
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(out / f"compare_{metric}.png", dpi=120)
        plt.close(fig)

    write_manifest(cfg, out / "manifest.json")
    print(
        f"compare complete: {len(methods)} methods x {len(values)} points "
        f"-> {out / 'compare.csv'}"
    )
    return 0


# -- entry point -----------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leosim",
        description="Deterministic LEO satellite task-management simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (flat dotted keys)")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--out", help="output directory override")
    common.add_argument("--policy", help="policy kind override")
    common.add_argument("--division", help="division kind override")
    common.add_argument("--routing", help="routing kind override")
    common.add_argument("--sizes", help="comma-separated task sizes in MB for sweep points")

    p_run = sub.add_parser("run", parents=[common], help="single simulation run")
    p_run.set_defaults(func=cmd_run)
    p_train = sub.add_parser("train", parents=[common], help="train a policy")
    p_train.set_defaults(func=cmd_train)
    p_compare = sub.add_parser("compare", parents=[common], help="method comparison")
    p_compare.add_argument(
        "--axis", choices=["division", "routing", "policy"], default="division"
    )
    p_compare.add_argument("--methods", help="comma-separated method kinds")
    p_compare.set_defaults(func=cmd_compare)
    p_sweep = sub.add_parser("sweep", parents=[common], help="parameter sweep")
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: structured one-line report
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
