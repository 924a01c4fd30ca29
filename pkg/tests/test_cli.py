"""Command-line entry points: artifact layout, reproducibility, overrides."""

import csv
import os
import subprocess
import sys
from pathlib import Path

import pytest

from leosim.cli import main
from leosim.config import RunConfig, to_flat_dict

CFG_YAML = """\
seed: 0
constellation.planes: 4
constellation.per_plane: 4
constellation.altitude_m: 1200000
link.elevation_mask_deg: 0
traffic.mode: stations
traffic.stations: 2
traffic.tasks_per_batch: 2
traffic.batches: 2
traffic.size_mb_min: 5
traffic.size_mb_max: 10
regions.k: 2
ga.div.population: 4
ga.div.generations: 2
ga.route.population: 6
ga.route.generations: 3
routing.thres_d_ms: 1000
maddpg.batch: 4
maddpg.warmup: 0
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(CFG_YAML)
    return path


def test_run_writes_all_artifacts(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    rc = main(["run", "--config", str(cfg_file), "--out", str(out)])
    assert rc == 0
    for name in ("metrics.csv", "manifest.json", "region_map.csv",
                 "topology.csv", "route_trace.csv"):
        assert (out / name).exists(), name
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == ("batch,policy,division,routing,avg_delay_ms,completion_rate,"
                      "avg_energy_j,max_region_variance,replans,drops")
    assert "run complete" in capsys.readouterr().out


def test_run_is_byte_reproducible(cfg_file, tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    main(["run", "--config", str(cfg_file), "--out", str(out1)])
    main(["run", "--config", str(cfg_file), "--out", str(out2)])
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
    assert (out1 / "route_trace.csv").read_bytes() == (out2 / "route_trace.csv").read_bytes()


def test_run_seed_override_changes_metrics(cfg_file, tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    main(["run", "--config", str(cfg_file), "--out", str(out1)])
    main(["run", "--config", str(cfg_file), "--out", str(out2), "--seed", "9"])
    assert (out1 / "metrics.csv").read_bytes() != (out2 / "metrics.csv").read_bytes()


def test_run_flag_overrides_reach_manifest(cfg_file, tmp_path):
    out = tmp_path / "out"
    rc = main(["run", "--config", str(cfg_file), "--out", str(out),
               "--policy", "trla", "--division", "grd", "--routing", "rsh"])
    assert rc == 0
    manifest = (out / "manifest.json").read_text()
    assert '"policy.kind": "TRLA"' in manifest
    assert '"division.kind": "GRD"' in manifest
    assert '"routing.kind": "RSH"' in manifest


def test_bad_config_returns_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("constellation.planes: 1\n")
    rc = main(["run", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_train_short_run_and_resume(tmp_path):
    cfg = tmp_path / "train.yaml"
    cfg.write_text(CFG_YAML + "train.steps: 6\n")
    out = tmp_path / "out"
    rc = main(["train", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    for name in ("checkpoint_last.txt", "checkpoint_best.txt",
                 "training_log.csv", "manifest.json"):
        assert (out / name).exists(), name
    first = (out / "checkpoint_last.txt").read_text().splitlines()[0]
    assert first == "mlp-checkpoint-v1"
    rows = list(csv.DictReader(open(out / "training_log.csv")))
    assert rows
    assert {"step", "agent", "critic_loss", "mean_q", "episode_reward"} <= set(rows[0])
    # resuming from the checkpoint picks up the recorded step counter
    cfg2 = tmp_path / "resume.yaml"
    cfg2.write_text(CFG_YAML + "train.steps: 8\n"
                    + f"policy.checkpoint: {out / 'checkpoint_last.txt'}\n")
    out2 = tmp_path / "out2"
    rc = main(["train", "--config", str(cfg2), "--out", str(out2)])
    assert rc == 0
    rows2 = list(csv.DictReader(open(out2 / "training_log.csv")))
    assert min(int(r["step"]) for r in rows2) == 7


def test_train_rejects_untrainable_policy(cfg_file, tmp_path, capsys):
    rc = main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "o"),
               "--policy", "ROLA"])
    assert rc == 2


def test_sweep_rows_one_per_value(cfg_file, tmp_path):
    out = tmp_path / "out"
    rc = main(["sweep", "--config", str(cfg_file), "--out", str(out),
               "--sizes", "5,8"])
    assert rc == 0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [r["value"] for r in rows] == ["5", "8"]
    for r in rows:
        assert 0.0 <= float(r["completion_rate"]) <= 1.0


def test_compare_structure_and_plots(cfg_file, tmp_path):
    out = tmp_path / "out"
    rc = main(["compare", "--config", str(cfg_file), "--out", str(out),
               "--axis", "division", "--methods", "DDRO,NRD", "--sizes", "5"])
    assert rc == 0
    rows = list(csv.DictReader(open(out / "compare.csv")))
    assert len(rows) == 1
    for m in ("DDRO", "NRD"):
        assert f"{m}_completion_rate" in rows[0]
    for metric in ("avg_delay_ms", "completion_rate", "avg_energy_j",
                   "max_region_variance"):
        assert (out / f"compare_{metric}.png").exists()


def test_compare_requires_two_methods(cfg_file, tmp_path):
    rc = main(["compare", "--config", str(cfg_file), "--out", str(tmp_path / "o"),
               "--methods", "DDRO", "--sizes", "5"])
    assert rc == 2


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "leosim.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("run", "train", "compare", "sweep"):
        assert cmd in proc.stdout
