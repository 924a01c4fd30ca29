"""Ground-station workloads: task generation, sub-task splitting, source-satellite
assignment, and per-source workload forecasting for the division stage."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PredictorConfig, TrafficConfig
from .constellation import Constellation
from .seeding import TAG_BATCH, TAG_STATIONS, rng_for

MB = 1e6  # bytes


class NoVisibleSatelliteError(RuntimeError):
    """Station sees no satellite above the elevation mask."""


class InsufficientHistoryError(ValueError):
    """Forecast requested with fewer samples than the predictor's minimum window."""


@dataclass
class Station:
    station_id: int
    lat_deg: float
    lon_deg: float


@dataclass
class Task:
    id: int
    origin: int  # station id, or source satellite id in sources mode
    source_sat: int
    size_q: int  # bytes
    arrival_time: float
    batch: int


@dataclass
class SubTask:
    parent: int
    index: int  # k in [1, K]
    ratio: float
    size: int  # bytes
    assigned_sat: int = -1
    f_alloc: float = 0.0  # cycles/s
    r_alloc: float = 0.0  # bits/s
    at_risk: bool = False
    dropped: bool = False


@dataclass
class WorkloadForecast:
    region_id: int
    horizon: float
    predicted_bytes: float
    predicted_task_count: int

    def __post_init__(self):
        if self.predicted_bytes < 0 or self.predicted_task_count < 0:
            raise ValueError("forecast values must be nonnegative")


def split_task(task: Task, ratios: np.ndarray) -> list[SubTask]:
    """Materialize K sub-tasks. Byte sizes are floored, then the remainder is
    handed out in descending fractional order so Σ sizes == size_q exactly."""
    ratios = np.asarray(ratios, dtype=float)
    if abs(float(ratios.sum()) - 1.0) > 1e-9 or (ratios < 0).any():
        raise ValueError("ratios must be a nonnegative vector summing to 1")
    raw = ratios * task.size_q
    sizes = np.floor(raw).astype(np.int64)
    remainder = int(task.size_q - sizes.sum())
    if remainder:
        frac = raw - np.floor(raw)
        # largest fraction first; index order breaks ties
        order = sorted(range(len(ratios)), key=lambda i: (-frac[i], i))
        for i in order[:remainder]:
            sizes[i] += 1
    return [
        SubTask(parent=task.id, index=k + 1, ratio=float(ratios[k]), size=int(sizes[k]))
        for k in range(len(ratios))
    ]


# -- stations ----------------------------------------------------------------


def make_stations(n: int, seed: int) -> list[Station]:
    """Uniform random placement on the sphere (area-true)."""
    rng = rng_for(seed, TAG_STATIONS)
    out = []
    for i in range(n):
        lat = math.degrees(math.asin(2.0 * rng.random() - 1.0))
        lon = rng.random() * 360.0 - 180.0
        out.append(Station(i, lat, lon))
    return out


def load_stations_csv(path: str | Path) -> list[Station]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        Station(int(r["station_id"]), float(r["lat_deg"]), float(r["lon_deg"]))
        for r in rows
    ]


def write_stations_csv(stations: list[Station], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "lat_deg", "lon_deg"])
        for s in stations:
            w.writerow([s.station_id, f"{s.lat_deg:.10g}", f"{s.lon_deg:.10g}"])


def nearest_source(station: Station, constellation: Constellation) -> int:
    """Visible satellite at minimum slant range; smallest flat id on ties."""
    visible = constellation.visible_sats(station.lat_deg, station.lon_deg)
    if not visible:
        raise NoVisibleSatelliteError(
            f"station {station.station_id} sees no satellite above the mask"
        )
    return visible[0][0]


# -- batch generation ----------------------------------------------------------


def generate_batch(
    stations: list[Station],
    constellation: Constellation,
    batch_index: int,
    seed: int,
    cfg: TrafficConfig,
    arrival_time: float = 0.0,
    id_base: int = 0,
) -> list[Task]:
    """Each station emits tasks_per_batch tasks with sizes from the configured
    uniform distribution, assigned to its nearest visible satellite."""
    if batch_index >= cfg.batches:
        raise ValueError(f"batch_index {batch_index} out of range [0, {cfg.batches})")
    rng = rng_for(seed, TAG_BATCH, batch_index)
    tasks: list[Task] = []
    for st in stations:
        src = nearest_source(st, constellation)
        for _ in range(cfg.tasks_per_batch):
            size = int(round(rng.uniform(cfg.size_mb_min, cfg.size_mb_max) * MB))
            tasks.append(
                Task(
                    id=id_base + len(tasks),
                    origin=st.station_id,
                    source_sat=src,
                    size_q=max(size, 1),
                    arrival_time=arrival_time,
                    batch=batch_index,
                )
            )
    return tasks


def generate_batch_from_sources(
    source_sats: list[int],
    batch_index: int,
    seed: int,
    cfg: TrafficConfig,
    arrival_time: float = 0.0,
    id_base: int = 0,
) -> list[Task]:
    """Source-satellite entry mode: tasks originate directly on N_src satellites."""
    if batch_index >= cfg.batches:
        raise ValueError(f"batch_index {batch_index} out of range [0, {cfg.batches})")
    rng = rng_for(seed, TAG_BATCH, batch_index)
    tasks: list[Task] = []
    for src in source_sats:
        for _ in range(cfg.tasks_per_batch):
            size = int(round(rng.uniform(cfg.size_mb_min, cfg.size_mb_max) * MB))
            tasks.append(
                Task(
                    id=id_base + len(tasks),
                    origin=src,
                    source_sat=src,
                    size_q=max(size, 1),
                    arrival_time=arrival_time,
                    batch=batch_index,
                )
            )
    return tasks


def write_task_trace(tasks: list[Task], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "batch", "station", "source_sat", "size_bytes", "arrival_s"])
        for t in tasks:
            w.writerow([t.id, t.batch, t.origin, t.source_sat, t.size_q, f"{t.arrival_time:.10g}"])


# -- workload prediction ---------------------------------------------------------


class EwmaPredictor:
    """Exponentially weighted moving average: f_t = alpha*x_t + (1-alpha)*f_{t-1},
    seeded at the first sample."""

    def __init__(self, alpha: float, min_history: int):
        if not (0.0 < alpha <= 1.0):
            raise ValueError("alpha must be in (0, 1]")
        self.alpha = alpha
        self.min_history = int(min_history)

    def predict(self, history: list[float]) -> float:
        if len(history) < self.min_history:
            raise InsufficientHistoryError(
                f"need >= {self.min_history} samples, have {len(history)}"
            )
        f = float(history[0])
        for x in history[1:]:
            f = self.alpha * float(x) + (1.0 - self.alpha) * f
        return max(f, 0.0)


class RnnPredictor:
    """Single-layer Elman recurrent net (hidden 16) fitted online with SGD on
    one-step-ahead error. Heavier but honors the learned-forecaster structure."""

    def __init__(self, alpha: float, min_history: int, hidden: int = 16, seed: int = 0,
                 lr: float = 0.05, epochs: int = 30):
        del alpha  # accepted for interface parity with EwmaPredictor
        self.min_history = int(min_history)
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        rng = rng_for(seed, TAG_STATIONS, 1)
        s = 1.0 / math.sqrt(hidden)
        self.W_in = rng.uniform(-s, s, size=hidden)
        self.W_h = rng.uniform(-s, s, size=(hidden, hidden))
        self.b_h = np.zeros(hidden)
        self.W_out = rng.uniform(-s, s, size=hidden)
        self.b_out = 0.0

    def _scan(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.zeros(self.hidden)
        hs, ys = [], []
        for x in xs:
            h = np.tanh(self.W_in * x + self.W_h @ h + self.b_h)
            hs.append(h)
            ys.append(self.W_out @ h + self.b_out)
        return np.array(hs), np.array(ys)

    def predict(self, history: list[float]) -> float:
        if len(history) < self.min_history:
            raise InsufficientHistoryError(
                f"need >= {self.min_history} samples, have {len(history)}"
            )
        xs = np.asarray(history, dtype=float)
        scale = max(xs.max(), 1.0)
        xs = xs / scale
        # fit one-step-ahead on the normalized series (truncated BPTT depth 1)
        for _ in range(self.epochs):
            hs, ys = self._scan(xs[:-1])
            err = ys - xs[1:]
            for t in range(len(err) - 1, -1, -1):
                g_out = err[t]
                self.W_out -= self.lr * g_out * hs[t] / len(err)
                self.b_out -= self.lr * g_out / len(err)
                g_h = g_out * self.W_out * (1.0 - hs[t] ** 2)
                self.W_in -= self.lr * g_h * xs[t] / len(err)
                self.b_h -= self.lr * g_h / len(err)
                if t > 0:
                    self.W_h -= self.lr * np.outer(g_h, hs[t - 1]) / len(err)
        _, ys = self._scan(xs)
        return max(float(ys[-1]) * scale, 0.0)


def make_predictor(cfg: PredictorConfig, seed: int = 0):
    if cfg.kind == "ewma":
        return EwmaPredictor(cfg.alpha, cfg.min_history)
    if cfg.kind == "rnn":
        return RnnPredictor(cfg.alpha, cfg.min_history, seed=seed)
    raise ValueError(f"unknown predictor kind {cfg.kind!r}")


@dataclass
class WorkloadHistory:
    """Per-source-satellite byte/count series, appended once per batch."""

    bytes_series: dict[int, list[float]] = field(default_factory=dict)
    count_series: dict[int, list[int]] = field(default_factory=dict)

    def record(self, source_sat: int, total_bytes: float, count: int) -> None:
        self.bytes_series.setdefault(source_sat, []).append(float(total_bytes))
        self.count_series.setdefault(source_sat, []).append(int(count))

    def record_batch(self, tasks: list[Task], sources: list[int]) -> None:
        per_src_bytes = {s: 0.0 for s in sources}
        per_src_count = {s: 0 for s in sources}
        for t in tasks:
            per_src_bytes[t.source_sat] = per_src_bytes.get(t.source_sat, 0.0) + t.size_q
            per_src_count[t.source_sat] = per_src_count.get(t.source_sat, 0) + 1
        for s in sorted(per_src_bytes):
            self.record(s, per_src_bytes[s], per_src_count[s])

    def forecast(self, source_sat: int, predictor, horizon: float = 1.0) -> WorkloadForecast:
        series = self.bytes_series.get(source_sat, [])
        counts = self.count_series.get(source_sat, [])
        pred_bytes = predictor.predict(series)
        mean_count = sum(counts) / len(counts) if counts else 0
        return WorkloadForecast(
            region_id=source_sat,
            horizon=horizon,
            predicted_bytes=pred_bytes,
            predicted_task_count=max(int(round(mean_count)), 0),
        )
