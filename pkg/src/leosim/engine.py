"""Discrete-time simulation loop: division -> routing -> offloading ->
execution, with delay/energy accounting, resource ledgers, and
congestion-triggered re-division.

Time advances in fixed rounds. Decisions within a round are simultaneous;
between rounds the constellation moves and finished allocations are released
at the next round boundary, so the world a later batch sees reflects the
residue of earlier ones.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .constellation import C_LIGHT, Constellation
from .offload import (
    InsufficientBufferError,
    TaskPlacement,
    build_states,
    commit_placement,
    make_policy,
    objective_j,
    reward,
    route_hosts,
)
from .regions import (
    NoFeasibleResizeError,
    RegionMap,
    RegionStats,
    chromosome_bounds,
    exchange_neighborhood,
    exhaustive_divide,
    ga_divide,
    ga_redivide,
    should_redivide,
    single_region_map,
    uniform_map,
)
from .routing import (
    Route,
    TransmitLog,
    UnreachableError,
    choose_destination,
    l1_ball,
    plan_cross_region,
    plan_route,
    plan_route_dijkstra,
    plan_route_greedy_rich,
    plan_route_random_hop,
    transmit_with_replanning,
)
from .traffic import (
    MB,
    InsufficientHistoryError,
    SubTask,
    Task,
    WorkloadHistory,
    generate_batch,
    generate_batch_from_sources,
    load_stations_csv,
    make_predictor,
    make_stations,
)


class EmptyScopeError(ValueError):
    """usage_variance asked to summarize an empty satellite set."""


class ZeroAllocationError(ValueError):
    """A sub-task reached execution with no compute or link allocation."""


def sim_threads() -> int:
    """Worker cap from SIM_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("SIM_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items, threads: int | None = None) -> list:
    """Order-preserving map, fanned out when SIM_THREADS allows. Results are
    identical for any worker count: fn must be pure per item."""
    items = list(items)
    n = threads if threads is not None else sim_threads()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# -- pure accounting ---------------------------------------------------------------


def compute_delay(sub: SubTask, hop_distances_m, eta: float) -> tuple[float, float]:
    """Per-subtask compute and transfer delay.

    t_comp = eta*q/f; t_comm = q*8/r + sum(d/c) over the route segment the
    sub-task's data crosses (serialization counts bits, sizes are bytes)."""
    propagation = math.fsum(float(d) / C_LIGHT for d in hop_distances_m)
    if sub.size == 0:
        return 0.0, propagation
    if sub.f_alloc <= 0.0 or sub.r_alloc <= 0.0:
        raise ZeroAllocationError(f"subtask {sub.parent}/{sub.index} has no allocation")
    t_comp = eta * sub.size / sub.f_alloc
    t_comm = sub.size * 8.0 / sub.r_alloc + propagation
    return t_comp, t_comm


def compute_energy(
    sub: SubTask, hop_rates_bps, tx_power_w: float, kappa0: float, eta: float
) -> tuple[float, float]:
    """Per-subtask compute and transfer energy.

    e_comp = kappa0*eta*q*f^2; e_comm charges each crossed link's full
    capacity-rate serialization time at transmit power."""
    if sub.size == 0:
        return 0.0, 0.0
    if sub.f_alloc <= 0.0:
        raise ZeroAllocationError(f"subtask {sub.parent}/{sub.index} has no allocation")
    e_comp = kappa0 * eta * sub.size * sub.f_alloc**2
    e_comm = math.fsum(tx_power_w * sub.size * 8.0 / float(r) for r in hop_rates_bps)
    return e_comp, e_comm


def usage_variance(world: Constellation, scope) -> float:
    """Population variance of richness over the satellites in scope."""
    sats = [int(s) for s in scope]
    if not sats:
        raise EmptyScopeError("variance over an empty satellite set")
    u = np.array([world.richness(s) for s in sats])
    return float(np.var(u))


# -- records & metrics ---------------------------------------------------------------


@dataclass
class SubTaskExec:
    index: int
    sat: int
    t_comp: float = 0.0
    t_comm: float = 0.0
    e_comp: float = 0.0
    e_comm: float = 0.0
    dropped: bool = False


@dataclass
class ExecutionRecord:
    task_id: int
    batch: int
    source_sat: int
    subs: list[SubTaskExec] = field(default_factory=list)
    t_total: float = 0.0
    e_total: float = 0.0
    completed: bool = False
    drop_reason: str = ""


@dataclass
class MetricsSnapshot:
    batch: int
    policy: str
    division: str
    routing: str
    avg_delay_s: float
    completion_rate: float
    avg_energy_j: float
    max_region_variance: float
    replans: int
    drops: int
    n_tasks: int
    n_completed: int
    zero_tasks: bool = False
    region_stats: dict = field(default_factory=dict)
    train_rows: list = field(default_factory=list)


def write_metrics_csv(snapshots: list[MetricsSnapshot], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "batch",
                "policy",
                "division",
                "routing",
                "avg_delay_ms",
                "completion_rate",
                "avg_energy_j",
                "max_region_variance",
                "replans",
                "drops",
            ]
        )
        for s in snapshots:
            w.writerow(
                [
                    s.batch,
                    s.policy,
                    s.division,
                    s.routing,
                    f"{s.avg_delay_s * 1000.0:.10g}",
                    f"{s.completion_rate:.10g}",
                    f"{s.avg_energy_j:.10g}",
                    f"{s.max_region_variance:.10g}",
                    s.replans,
                    s.drops,
                ]
            )


@dataclass
class RouteTraceRow:
    task_id: int
    subtask_k: int
    hop_index: int
    sat_id: int
    predicted_delay_ms: float
    replanned: bool


# -- engine ---------------------------------------------------------------------------


class Engine:
    """Owns the world, the region map, the policy, and the round loop."""

    def __init__(self, cfg: RunConfig, policy=None, trace: bool = False):
        self.cfg = cfg
        self.k = cfg.regions.k
        self.world = Constellation(cfg.constellation, cfg.link, cfg.seed)
        self.q_max = float(cfg.traffic.size_mb_max) * MB
        self.trace = trace

        if cfg.traffic.mode == "stations":
            if cfg.traffic.stations_csv:
                self.stations = load_stations_csv(cfg.traffic.stations_csv)
            else:
                self.stations = make_stations(cfg.traffic.stations, cfg.seed)
            self.source_sats: list[int] = []
        else:
            self.stations = []
            n = self.world.n_sats
            self.source_sats = sorted(
                {int(round(i * n / cfg.traffic.sources)) % n for i in range(cfg.traffic.sources)}
            )

        self.predictor = make_predictor(cfg.predictor, cfg.seed)
        self.history = WorkloadHistory()
        self.policy = policy if policy is not None else make_policy(
            cfg.policy.kind,
            cfg.maddpg.agents,
            self.k,
            cfg.nn,
            cfg.maddpg,
            cfg.policy,
            cfg.seed,
            cfg.constellation.f_max_cycles,
            cfg.engine.eta_cycles_per_byte,
            cfg.engine.task_budget_s,
            self.q_max,
        )

        self.release_queue: list[tuple[float, list[int]]] = []
        self.records: list[ExecutionRecord] = []
        self.trace_rows: list[RouteTraceRow] = []
        self.redivisions = 0
        self.unserved = 0
        self.map = self._initial_division()

    # -- setup helpers ----------------------------------------------------------

    def _hop_cap(self) -> int:
        return int(
            round(self.cfg.routing.hop_cap_factor * max(self.world.planes, self.world.per_plane))
        )

    def _expected_prior_bytes(self) -> float:
        t = self.cfg.traffic
        mean_mb = 0.5 * (t.size_mb_min + t.size_mb_max)
        return t.tasks_per_batch * mean_mb * MB

    def _forecast_bytes(self, src: int) -> float:
        """EWMA/RNN forecast once history suffices, running mean before that,
        config-derived prior before any observation."""
        try:
            return self.history.forecast(src, self.predictor).predicted_bytes
        except InsufficientHistoryError:
            series = self.history.bytes_series.get(src, [])
            if series:
                return sum(series) / len(series)
            return self._expected_prior_bytes()

    def _sources_now(self) -> list[int]:
        if self.cfg.traffic.mode == "sources":
            return list(self.source_sats)
        out = set()
        for st in self.stations:
            vis = self.world.visible_sats(st.lat_deg, st.lon_deg)
            if vis:
                out.add(vis[0][0])
        return sorted(out)

    def _forecast_loads(self) -> dict[int, float]:
        sources = self._sources_now()
        return {s: self._forecast_bytes(s) for s in sources}

    # -- division ---------------------------------------------------------------

    def _scratch_eval(self, map_: RegionMap, loads: dict[int, float]) -> float:
        """Division fitness b_m / t_bar: a synthetic batch of forecast load on
        a resource-reset clone, mirroring the real wave structure (one task per
        source per wave, commits stacking within the batch), uniform K-way
        split, half shares, greedy routing. Deterministic in (map, loads)."""
        w = self.world.clone(reset_resources=True)
        eng_cfg = self.cfg.engine
        budget = eng_cfg.task_budget_s
        n_waves = max(1, self.cfg.traffic.tasks_per_batch)
        sources = [s for s in sorted(loads) if loads[s] > 0]
        delays = []
        completed = 0
        total = 0
        for _ in range(n_waves):
            for src in sources:
                q = loads[src] / n_waves
                total += 1
                region = int(map_.region_of[src])
                members = set(int(m) for m in map_.members(region))
                try:
                    dst = choose_destination(w, map_, src, self.k)
                    route = plan_route_greedy_rich(
                        w, src, dst, hop_cap=self._hop_cap(), allowed=members
                    )
                except UnreachableError:
                    continue
                hosts = route_hosts(route.hops, self.k)
                t_worst = 0.0
                feasible = True
                for host in hosts:
                    share_q = q / self.k
                    f_frac = 0.5 * max(0.0, 1.0 - float(w.f_used[host]))
                    r_frac = 0.5 * max(0.0, 1.0 - float(w.r_used[host]))
                    if f_frac <= 0.0 or r_frac <= 0.0:
                        feasible = False
                        break
                    w.allocate(host, f_frac, r_frac)
                    t_comp = eng_cfg.eta_cycles_per_byte * share_q / (
                        f_frac * w.cfg.f_max_cycles
                    )
                    t_comm = share_q * 8.0 / (r_frac * w.cfg.r_max_bps)
                    t_worst = max(t_worst, t_comp + t_comm)
                if feasible and t_worst <= budget:
                    completed += 1
                    delays.append(t_worst)
        if total == 0 or completed == 0 or not delays:
            return 0.0
        t_bar = sum(delays) / len(delays)
        if t_bar <= 0.0:
            return 0.0
        return (completed / total) / t_bar

    def _division_fitness(self, loads: dict[int, float]):
        """Memoized (l, w) -> fitness, pre-evaluated in parallel so results are
        identical for any SIM_THREADS."""
        w_grid, p_grid = self.world.per_plane, self.world.planes
        lo, hi = chromosome_bounds(self.world.n_sats, self.k)
        candidates = [
            (l, w)
            for l in range(min(lo, w_grid), min(hi, w_grid) + 1)
            for w in range(min(lo, p_grid), min(hi, p_grid) + 1)
        ]

        def one(lw):
            l, w = lw
            return self._scratch_eval(uniform_map(p_grid, w_grid, l, w), loads)

        values = parallel_map(one, candidates)
        memo = dict(zip(candidates, values))

        def fit(l: int, w: int) -> float:
            key = (l, w)
            if key not in memo:
                memo[key] = one(key)
            return memo[key]

        return fit

    def _quadtree_map(self, loads: dict[int, float]) -> RegionMap:
        """Recursive quadrant splitting while any region carries more than the
        configured share of the total forecast load."""
        planes, per_plane = self.world.planes, self.world.per_plane
        total = sum(loads.values()) or 1.0
        thr = self.cfg.regions.qtrd_split_threshold

        def rect_load(rect):
            p_lo, p_hi, s_lo, s_hi = rect
            acc = 0.0
            for src, q in loads.items():
                p, s = divmod(src, per_plane)
                if p_lo <= p <= p_hi and s_lo <= s <= s_hi:
                    acc += q
            return acc

        leaves = []
        stack = [(0, planes - 1, 0, per_plane - 1)]
        while stack:
            rect = stack.pop(0)
            p_lo, p_hi, s_lo, s_hi = rect
            can_split = (p_hi - p_lo + 1) >= 2 and (s_hi - s_lo + 1) >= 2
            if can_split and rect_load(rect) / total > thr:
                p_mid = (p_lo + p_hi) // 2
                s_mid = (s_lo + s_hi) // 2
                stack.extend(
                    [
                        (p_lo, p_mid, s_lo, s_mid),
                        (p_lo, p_mid, s_mid + 1, s_hi),
                        (p_mid + 1, p_hi, s_lo, s_mid),
                        (p_mid + 1, p_hi, s_mid + 1, s_hi),
                    ]
                )
            else:
                leaves.append(rect)
        region_of = np.full(planes * per_plane, -1, dtype=int)
        bounds = {}
        for rid, rect in enumerate(leaves):
            p_lo, p_hi, s_lo, s_hi = rect
            bounds[rid] = rect
            for p in range(p_lo, p_hi + 1):
                for s in range(s_lo, s_hi + 1):
                    region_of[p * per_plane + s] = rid
        m = RegionMap(planes, per_plane, region_of, bounds)
        m.validate_partition()
        return m

    def _initial_division(self) -> RegionMap:
        kind = self.cfg.division.kind
        planes, per_plane = self.world.planes, self.world.per_plane
        if kind == "NRD":
            return single_region_map(planes, per_plane)
        loads = self._forecast_loads()
        if kind == "QTRD":
            return self._quadtree_map(loads)
        fit = self._division_fitness(loads)
        if kind == "GRD":
            l, w, _ = exhaustive_divide(
                fit, self.world.n_sats, self.k, planes, per_plane, squares_only=True
            )
        elif kind == "DDRO":
            l, w, _ = ga_divide(
                fit, self.world.n_sats, self.k, self.cfg.ga_div, self.cfg.seed, planes, per_plane
            )
        else:
            raise ValueError(f"unknown division kind {kind!r}")
        return uniform_map(planes, per_plane, l, w)

    def _maybe_redivide(self, batch_index: int) -> None:
        """DDRO only: at most one resize per triggered region per batch."""
        if self.cfg.division.kind != "DDRO":
            return
        loads = self._forecast_loads()
        for rid in self.map.region_ids():
            if not should_redivide(
                rid, self.map, self.cfg.regions.thr_tfr, self.cfg.regions.delay_factor
            ):
                continue
            try:
                new_map, _, _ = ga_redivide(
                    self.map,
                    rid,
                    lambda cand: self._scratch_eval(cand, loads),
                    self.k,
                    self.cfg.ga_div,
                    self.cfg.seed + batch_index,
                )
            except NoFeasibleResizeError:
                continue
            for r, st in self.map.load_stats.items():
                if r in new_map.bounds:
                    new_map.load_stats[r] = st
            self.map = new_map
            self.redivisions += 1

    # -- routing ----------------------------------------------------------------

    def _destination_and_scope(self, src: int):
        """Destination choice plus the allowed-satellite scope and hop cap the
        route must respect. NRD confines to the local L1 ball."""
        kind = self.cfg.division.kind
        if kind == "NRD":
            # neighborhood processing: only the source's direct grid neighbors
            ball = l1_ball(self.world, src, 1)
            dst = choose_destination(
                self.world, self.map, src, self.k, self.cfg.routing.dst_mode, allowed=ball
            )
            return dst, ball, max(1, self.k - 1), False
        region = int(self.map.region_of[src])
        members = set(int(m) for m in self.map.members(region))
        cross = False
        if (
            self.cfg.routing.kind == "GA"
            and self.cfg.routing.allow_cross_region
            and self.map.n_regions > 1
        ):
            own = self.map.stats(region)
            if own.populated:
                digests = exchange_neighborhood(self.map, region)
                best = None
                for d in sorted(digests):
                    dg = digests[d]
                    if self.map.stats(dg.region_id).populated and (
                        best is None or dg.richness_mean > best.richness_mean
                    ):
                        best = dg
                if (
                    best is not None
                    and best.richness_mean - own.richness_mean > self.cfg.routing.cross_region_gap
                ):
                    far = [int(m) for m in self.map.members(best.region_id)]
                    far.sort(key=lambda s: (-self.world.richness(s), s))
                    members = members | {int(m) for m in self.map.members(best.region_id)}
                    return far[0], members, self._hop_cap(), True
        dst = choose_destination(
            self.world, self.map, src, self.k, self.cfg.routing.dst_mode
        )
        return dst, members, self._hop_cap(), cross

    def _plan_once(self, src: int, dst: int, allowed, cap: int, seed: int, min_len: int) -> Route:
        kind = self.cfg.routing.kind
        if kind == "GA":
            return plan_route(
                self.world, src, dst, self.cfg.ga_route, seed,
                hop_cap=cap, allowed=allowed, min_len=min_len,
            )
        if kind == "CRP":
            return plan_route_dijkstra(self.world, src, dst, allowed)
        if kind == "ORP":
            return plan_route_greedy_rich(self.world, src, dst, hop_cap=cap, allowed=allowed)
        if kind == "RSH":
            return plan_route_random_hop(self.world, src, dst, seed, hop_cap=cap, allowed=allowed)
        raise ValueError(f"unknown routing kind {kind!r}")

    def _route_task(self, task: Task) -> tuple[TransmitLog | None, str]:
        """Plan and walk the task's route. Returns (log, drop_reason)."""
        try:
            dst, allowed, cap, cross = self._destination_and_scope(task.source_sat)
            base_seed = self.cfg.seed + 7919 * (task.id + 1)
            if cross:
                route = plan_cross_region(
                    self.world, self.map, task.source_sat, dst,
                    self.cfg.ga_route, base_seed, hop_cap=cap,
                )
            else:
                route = self._plan_once(task.source_sat, dst, allowed, cap, base_seed, self.k)
        except UnreachableError:
            return None, "unreachable"

        calls = {"n": 0}

        def planner(cur: int, to: int) -> Route:
            calls["n"] += 1
            return self._plan_once(
                cur, to, allowed, cap, base_seed + 104729 * calls["n"], 1
            )

        log = transmit_with_replanning(
            self.world,
            route,
            task.size_q,
            self.cfg.routing.thres_d_ms / 1000.0,
            planner,
            max_replans=self.cfg.routing.max_replans,
        )
        if self.trace:
            for rec in log.hop_records:
                self.trace_rows.append(
                    RouteTraceRow(
                        task.id,
                        min(rec.hop_index, self.k - 1),
                        rec.hop_index,
                        rec.sat,
                        rec.predicted_delay_s * 1000.0,
                        rec.replanned,
                    )
                )
        if log.dropped:
            return log, log.drop_reason
        return log, ""

    # -- execution ----------------------------------------------------------------

    def _release_due(self) -> None:
        now = self.world.epoch_s
        keep = []
        for due, handles in self.release_queue:
            if due <= now:
                for h in handles:
                    self.world.release(h)
            else:
                keep.append((due, handles))
        self.release_queue = keep

    def _drain(self) -> None:
        for _, handles in self.release_queue:
            for h in handles:
                self.world.release(h)
        self.release_queue = []

    def _execute(self, placement: TaskPlacement, realized: list[int]) -> ExecutionRecord:
        task = placement.task
        eng = self.cfg.engine
        rec = ExecutionRecord(task_id=task.id, batch=task.batch, source_sat=task.source_sat)
        dropped = False
        for k_idx, sub in enumerate(placement.subtasks):
            host = placement.hosts[k_idx]
            idx = min(k_idx, len(realized) - 1)
            sx = SubTaskExec(index=sub.index, sat=host, dropped=sub.dropped)
            if not sub.dropped:
                dists = [
                    self.world.distance_m(realized[i], realized[i + 1]) for i in range(idx)
                ]
                rates = [
                    self.world.isl_rate_bps(realized[i], realized[i + 1]) for i in range(idx)
                ]
                sx.t_comp, sx.t_comm = compute_delay(sub, dists, eng.eta_cycles_per_byte)
                sx.e_comp, sx.e_comm = compute_energy(
                    sub, rates, self.world.link.tx_power_w, eng.kappa0, eng.eta_cycles_per_byte
                )
            else:
                dropped = True
            rec.subs.append(sx)
        rec.t_total = max((s.t_comp + s.t_comm for s in rec.subs if not s.dropped), default=0.0)
        rec.e_total = math.fsum(s.e_comp + s.e_comm for s in rec.subs if not s.dropped)
        if dropped:
            rec.completed = False
            rec.drop_reason = "alloc"
        elif rec.t_total > eng.task_budget_s:
            rec.completed = False
            rec.drop_reason = "budget"
        else:
            rec.completed = True

        if rec.completed:
            # charge energy: compute at the host, transfers at each sender
            for k_idx, sx in enumerate(rec.subs):
                if sx.e_comp > 0:
                    self.world.consume_energy(sx.sat, sx.e_comp)
                idx = min(k_idx, len(realized) - 1)
                sub = placement.subtasks[k_idx]
                for i in range(idx):
                    r = self.world.isl_rate_bps(realized[i], realized[i + 1])
                    self.world.consume_energy(
                        realized[i], self.world.link.tx_power_w * sub.size * 8.0 / r
                    )
            due = self.world.epoch_s + rec.t_total
            if placement.alloc_handles:
                self.release_queue.append((due, list(placement.alloc_handles)))
        else:
            for h in placement.alloc_handles:
                self.world.release(h)
        return rec

    # -- rounds & batches -----------------------------------------------------------

    def _rounds_of(self, tasks: list[Task]) -> list[list[Task]]:
        """Wave r holds the r-th task of every source, sources in id order."""
        per_src: dict[int, list[Task]] = {}
        for t in sorted(tasks, key=lambda t: (t.source_sat, t.id)):
            per_src.setdefault(t.source_sat, []).append(t)
        depth = max((len(v) for v in per_src.values()), default=0)
        rounds = []
        for r in range(depth):
            wave = [per_src[s][r] for s in sorted(per_src) if len(per_src[s]) > r]
            rounds.append(wave)
        return rounds

    def _chunks(self, wave: list[Task], wave_index: int = 0) -> list[list[Task]]:
        # rotate task-to-slot assignment each wave so no agent slot always
        # commits first; a fixed order would let early slots hoard resources
        # without ever being starved themselves
        n = self.policy_agents()
        if len(wave) > 1:
            off = wave_index % len(wave)
            wave = wave[off:] + wave[:off]
        return [wave[i : i + n] for i in range(0, len(wave), n)]

    def policy_agents(self) -> int:
        return getattr(self.policy, "n_agents", self.cfg.maddpg.agents)

    def _generate(self, batch_index: int, id_base: int) -> list[Task]:
        t = self.cfg.traffic
        if t.mode == "sources":
            return generate_batch_from_sources(
                self.source_sats, batch_index, self.cfg.seed, t,
                arrival_time=self.world.epoch_s, id_base=id_base,
            )
        visible = [
            st
            for st in self.stations
            if self.world.visible_sats(st.lat_deg, st.lon_deg)
        ]
        self.unserved += (len(self.stations) - len(visible)) * t.tasks_per_batch
        return generate_batch(
            visible, self.world, batch_index, self.cfg.seed, t,
            arrival_time=self.world.epoch_s, id_base=id_base,
        )

    def _region_variances(self) -> float:
        worst = 0.0
        for rid in self.map.region_ids():
            members = self.map.members(rid)
            if len(members):
                worst = max(worst, usage_variance(self.world, members))
        return worst

    def run_batch(
        self,
        batch_index: int,
        tasks: list[Task],
        train: bool = False,
        collect: bool | None = None,
    ) -> MetricsSnapshot:
        cfg = self.cfg
        collect = train if collect is None else collect
        store = train and getattr(self.policy, "trainable", False)
        batch_records: list[ExecutionRecord] = []
        replans = 0
        max_var = 0.0
        train_rows: list[dict] = []

        n_rounds = max(1, self.cfg.traffic.tasks_per_batch)
        for wave_i, wave in enumerate(self._rounds_of(tasks)):
            self._release_due()
            for chunk in self._chunks(wave, batch_index * n_rounds + wave_i):
                survivors: list[tuple[Task, list[int]]] = []
                for task in chunk:
                    log, reason = self._route_task(task)
                    if log is not None:
                        replans += log.replans
                    if reason:
                        rec = ExecutionRecord(
                            task_id=task.id, batch=task.batch, source_sat=task.source_sat,
                            completed=False, drop_reason=reason,
                        )
                        batch_records.append(rec)
                        self.records.append(rec)
                        continue
                    survivors.append((task, log.realized))
                if not survivors:
                    continue
                hosts_per_agent = [route_hosts(r, self.k) for _, r in survivors]
                sizes = [t.size_q for t, _ in survivors]
                states = build_states(self.world, hosts_per_agent, sizes, self.q_max)
                actions = [
                    self.policy.act(i, st, train) for i, st in enumerate(states)
                ]
                placements = []
                for i, (task, realized) in enumerate(survivors):
                    placement = commit_placement(
                        self.world, task, hosts_per_agent[i], actions[i]
                    )
                    placement.state = states[i]
                    placement.action = actions[i]
                    placements.append(placement)
                    rec = self._execute(placement, realized)
                    batch_records.append(rec)
                    self.records.append(rec)
                if collect or store:
                    train_rows.append(
                        self._training_transition(
                            states, actions, placements, batch_records, store
                        )
                    )
            max_var = max(max_var, self._region_variances())
            self.world.advance_time(cfg.engine.round_s)

        self._update_region_stats(batch_records)
        self.history.record_batch(tasks, self._sources_now())
        self._maybe_redivide(batch_index)

        n = len(tasks)
        done = [r for r in batch_records if r.completed]
        completion = (len(done) / n) if n else 1.0
        avg_delay = sum(r.t_total for r in done) / len(done) if done else 0.0
        avg_energy = sum(r.e_total for r in done) / len(done) if done else 0.0
        snap = MetricsSnapshot(
            batch=batch_index,
            policy=cfg.policy.kind,
            division=cfg.division.kind,
            routing=cfg.routing.kind,
            avg_delay_s=avg_delay,
            completion_rate=completion,
            avg_energy_j=avg_energy,
            max_region_variance=max_var,
            replans=replans,
            drops=sum(1 for r in batch_records if not r.completed),
            n_tasks=n,
            n_completed=len(done),
            zero_tasks=(n == 0),
            region_stats={
                rid: self.map.stats(rid) for rid in self.map.region_ids()
            },
            train_rows=train_rows,
        )
        return snap

    def _training_transition(
        self, states, actions, placements, batch_records, store: bool
    ) -> dict:
        """Reward each agent from its own task outcome and host-scope variance.
        When store is set, also re-observe the same hosts for the successor
        state and push the padded transition into the policy's buffer."""
        cfg = self.cfg
        n_agents = self.policy_agents()
        rewards = np.zeros(n_agents)
        for i, p in enumerate(placements):
            rec = next(r for r in reversed(batch_records) if r.task_id == p.task.id)
            var = usage_variance(self.world, p.hosts)
            j = objective_j(
                rec.t_total if rec.completed else 0.0,
                1.0 if rec.completed else 0.0,
                cfg.reward.omega,
            )
            rewards[i] = reward(j, var, cfg.reward.R_const, cfg.reward.rho)
        if store:
            obs_dim = len(self.policy.observe(states[0]))
            act_dim = 3 * self.k
            obs = [np.zeros(obs_dim) for _ in range(n_agents)]
            acts = [np.zeros(act_dim) for _ in range(n_agents)]
            next_obs = [np.zeros(obs_dim) for _ in range(n_agents)]
            hosts_per_agent = [p.hosts for p in placements]
            sizes = [p.task.size_q for p in placements]
            post_states = build_states(self.world, hosts_per_agent, sizes, self.q_max)
            for i in range(len(placements)):
                obs[i] = self.policy.observe(states[i])
                acts[i] = actions[i].vector()
                next_obs[i] = self.policy.observe(post_states[i])
            self.policy.record(obs, acts, rewards, next_obs)
        return {"rewards": rewards.copy(), "n_real": len(placements)}

    def _update_region_stats(self, batch_records: list[ExecutionRecord]) -> None:
        per_region: dict[int, list[ExecutionRecord]] = {}
        for rec in batch_records:
            rid = int(self.map.region_of[rec.source_sat])
            per_region.setdefault(rid, []).append(rec)
        for rid in self.map.region_ids():
            recs = per_region.get(rid, [])
            members = self.map.members(rid)
            rich = float(np.mean([self.world.richness(int(m)) for m in members]))
            if not recs:
                self.map.load_stats[rid] = RegionStats(0.0, 0.0, rich, False)
                continue
            done = [r for r in recs if r.completed]
            fail = 1.0 - len(done) / len(recs)
            delay = (
                sum(r.t_total for r in done) / len(done)
                if done
                else self.cfg.engine.task_budget_s
            )
            self.map.load_stats[rid] = RegionStats(fail, delay, rich, True)

    def run(self) -> list[MetricsSnapshot]:
        snaps = []
        id_base = 0
        for b in range(self.cfg.traffic.batches):
            tasks = self._generate(b, id_base)
            id_base += len(tasks)
            snaps.append(self.run_batch(b, tasks))
        self._drain()
        return snaps

    # -- training -----------------------------------------------------------------

    def train(self, steps: int, log_cb=None, start_step: int = 0) -> list[dict]:
        """Round-granular training: each wave-chunk transition feeds the
        buffer; one gradient step per recorded transition once the buffer can
        fill a batch. A step is one recorded transition, so the loop always
        terminates even before the buffer warms up. Returns per-step log rows."""
        if not getattr(self.policy, "trainable", False):
            raise ValueError(f"policy {self.cfg.policy.kind} is not trainable")
        logs: list[dict] = []
        step = start_step
        id_base = 0
        while step < steps:
            self.reset_run()
            self.policy.reset_noise()
            step_at_reset = step
            for b in range(self.cfg.traffic.batches):
                if step >= steps:
                    break
                tasks = self._generate(b, id_base)
                id_base += len(tasks)
                snap = self.run_batch(b, tasks, train=True)
                for row in snap.train_rows:
                    if np.any(~np.isfinite(row["rewards"])):
                        raise RuntimeError("training diverged: non-finite reward")
                    step += 1
                    try:
                        stats = self.policy.train_step()
                    except InsufficientBufferError:
                        stats = []
                    mean_r = float(np.mean(row["rewards"][: row["n_real"]]))
                    for st in stats or [
                        {"agent": -1, "critic_loss": float("nan"), "mean_q": float("nan")}
                    ]:
                        entry = {
                            "step": step,
                            "agent": st["agent"],
                            "critic_loss": st["critic_loss"],
                            "mean_q": st["mean_q"],
                            "episode_reward": mean_r,
                        }
                        logs.append(entry)
                        if log_cb:
                            log_cb(entry)
                    if step >= steps:
                        break
            if step == step_at_reset:
                # a full pass yielded no transitions: nothing will ever train
                raise RuntimeError(
                    "traffic produced no training transitions; check station "
                    "visibility and tasks_per_batch"
                )
        return logs

    def evaluate(self, episodes: int = 1) -> float:
        """Mean per-transition agent reward with exploration off; works for any
        policy kind. The run state is reset before and after."""
        means: list[float] = []
        id_base = 0
        for _ in range(max(1, episodes)):
            self.reset_run()
            for b in range(self.cfg.traffic.batches):
                tasks = self._generate(b, id_base)
                id_base += len(tasks)
                snap = self.run_batch(b, tasks, train=False, collect=True)
                for row in snap.train_rows:
                    means.append(float(np.mean(row["rewards"][: row["n_real"]])))
            self._drain()
        self.reset_run()
        if not means:
            return 0.0
        return float(np.mean(means))

    def reset_run(self) -> None:
        """Fresh resources, epoch, ledgers, forecasts, and region map; policy
        untouched."""
        self.world = Constellation(self.cfg.constellation, self.cfg.link, self.cfg.seed)
        self.release_queue = []
        self.records = []
        self.trace_rows = []
        self.predictor = make_predictor(self.cfg.predictor, self.cfg.seed)
        self.history = WorkloadHistory()
        self.redivisions = 0
        self.unserved = 0
        self.map = self._initial_division()
