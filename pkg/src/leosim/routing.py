"""Route planning on the satellite grid: genetic search maximizing average
residual-resource richness, greedy/shortest/random baselines, mid-flight
re-planning on predicted per-hop delay violations, and two-phase cross-region
routes through boundary satellites.

Routes are simple paths (no repeated satellite) with consecutive-hop ISL
adjacency. The hop cap counts edges, not nodes.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import GaRouteConfig
from .constellation import C_LIGHT, DIRECTIONS, Constellation
from .regions import RegionMap, exchange_neighborhood
from .seeding import TAG_ROUTE_GA, TAG_ROUTE_RSH, rng_for


class UnreachableError(RuntimeError):
    """No admissible path exists between the endpoints."""


class EmptyRouteError(ValueError):
    pass


class NonAdjacentRegionError(ValueError):
    """Cross-region planning requested for regions that share no boundary."""


@dataclass
class Route:
    hops: list[int]
    planned_at: float = 0.0
    region_scope: object = None

    def __len__(self) -> int:
        return len(self.hops)


@dataclass
class HopRecord:
    hop_index: int
    sat: int
    predicted_delay_s: float
    replanned: bool


@dataclass
class TransmitLog:
    source: int
    destination: int
    payload_bytes: int
    realized: list[int] = field(default_factory=list)
    hop_records: list[HopRecord] = field(default_factory=list)
    replans: int = 0
    dropped: bool = False
    drop_reason: str = ""


def richness(world: Constellation, sat: int) -> float:
    return world.richness(sat)


def route_fitness(world: Constellation, hops: list[int]) -> float:
    """Mean richness over the route's satellites, in [0, 2]."""
    if not hops:
        raise EmptyRouteError("route has no satellites")
    return float(sum(world.richness(s) for s in hops) / len(hops))


# -- path primitives ----------------------------------------------------------


def _allowed_neighbors(world: Constellation, sat: int, allowed) -> list[int]:
    ns = world.neighbors(sat)
    if allowed is None:
        return list(ns)
    return [n for n in ns if n in allowed]


def bfs_path(world: Constellation, src: int, dst: int, allowed=None, avoid=frozenset()):
    """Deterministic shortest path (neighbor order N,S,E,W); None if cut off."""
    if src == dst:
        return [src]
    parent = {src: -1}
    q = deque([src])
    while q:
        cur = q.popleft()
        for n in _allowed_neighbors(world, cur, allowed):
            if n in parent or n in avoid:
                continue
            parent[n] = cur
            if n == dst:
                path = [n]
                while path[-1] != src:
                    path.append(parent[path[-1]])
                return path[::-1]
            q.append(n)
    return None


def l1_ball(world: Constellation, center: int, radius: int) -> set[int]:
    """All satellites within `radius` grid hops of center."""
    seen = {center}
    frontier = [center]
    for _ in range(radius):
        nxt = []
        for sat in frontier:
            for n in world.neighbors(sat):
                if n not in seen:
                    seen.add(n)
                    nxt.append(n)
        frontier = nxt
    return seen


def _grid_distance(world: Constellation, a: int, b: int) -> int:
    pa, sa = world.plane_of(a), world.slot_of(a)
    pb, sb = world.plane_of(b), world.slot_of(b)
    dp = abs(pa - pb)
    ds = abs(sa - sb)
    return min(dp, world.planes - dp) + min(ds, world.per_plane - ds)


def _dedupe_loops(path: list[int]) -> list[int]:
    """Cut out any cycle: when a node repeats, drop the loop between visits."""
    out: list[int] = []
    pos: dict[int, int] = {}
    for node in path:
        if node in pos:
            cut = pos[node]
            for dropped in out[cut + 1:]:
                del pos[dropped]
            out = out[: cut + 1]
        else:
            pos[node] = len(out)
            out.append(node)
    return out


def _repair(world: Constellation, path: list[int], src: int, dst: int, allowed) -> list[int] | None:
    """Force a candidate into a valid simple src->dst path, or give up (None)."""
    if not path or path[0] != src:
        path = [src] + [p for p in path if p != src]
    fixed = [src]
    for node in path[1:]:
        if node == fixed[-1]:
            continue
        if world.are_adjacent(fixed[-1], node) and (allowed is None or node in allowed):
            fixed.append(node)
        else:
            bridge = bfs_path(world, fixed[-1], node, allowed)
            if bridge is None:
                break
            fixed.extend(bridge[1:])
    if fixed[-1] != dst:
        tail = bfs_path(world, fixed[-1], dst, allowed, avoid=frozenset(fixed[:-1]))
        if tail is None:
            tail = bfs_path(world, fixed[-1], dst, allowed)
            if tail is None:
                return None
        fixed.extend(tail[1:])
    fixed = _dedupe_loops(fixed)
    return fixed if fixed[0] == src and fixed[-1] == dst else None


def _random_walk(world, src, dst, allowed, cap, rng) -> list[int] | None:
    """Biased walk toward dst over unvisited nodes, BFS-completed."""
    path = [src]
    visited = {src}
    while path[-1] != dst and len(path) <= cap:
        options = [n for n in _allowed_neighbors(world, path[-1], allowed) if n not in visited]
        if not options:
            break
        if rng.random() < 0.7:
            d = min(_grid_distance(world, n, dst) for n in options)
            options = [n for n in options if _grid_distance(world, n, dst) == d]
        nxt = options[int(rng.integers(0, len(options)))]
        path.append(nxt)
        visited.add(nxt)
    if path[-1] != dst:
        tail = bfs_path(world, path[-1], dst, allowed, avoid=frozenset(path[:-1]))
        if tail is None:
            return None
        path.extend(tail[1:])
    return path


def _greedy_rich_path(world, src, dst, allowed, cap) -> list[int] | None:
    path = [src]
    visited = {src}
    while path[-1] != dst and len(path) <= cap:
        options = [n for n in _allowed_neighbors(world, path[-1], allowed) if n not in visited]
        if not options:
            break
        options.sort(key=lambda n: (-world.richness(n), _grid_distance(world, n, dst), n))
        path.append(options[0])
        visited.add(options[0])
    if path[-1] != dst:
        tail = bfs_path(world, path[-1], dst, allowed, avoid=frozenset(path[:-1]))
        if tail is None:
            return None
        path.extend(tail[1:])
    return path


# -- genetic route planner ---------------------------------------------------------


def _route_better(world, a: list[int], fa: float, b: list[int], fb: float) -> bool:
    """Higher fitness, then fewer hops, then lexicographically smaller."""
    if fa != fb:
        return fa > fb
    if len(a) != len(b):
        return len(a) < len(b)
    return a < b


def plan_route(
    world: Constellation,
    src: int,
    dst: int,
    ga: GaRouteConfig,
    seed: int,
    hop_cap: int | None = None,
    allowed=None,
    min_len: int = 1,
    seed_routes: list[list[int]] | None = None,
    population: int | None = None,
    generations: int | None = None,
) -> Route:
    """Genetic search for the simple path maximizing mean richness."""
    if src == dst:
        raise ValueError("src and dst must differ")
    if hop_cap is None:
        hop_cap = 2 * max(world.planes, world.per_plane)
    cap_nodes = hop_cap + 1
    pop_n = population if population is not None else ga.population
    gens = generations if generations is not None else ga.generations
    rng = rng_for(seed, TAG_ROUTE_GA)

    shortest = bfs_path(world, src, dst, allowed)
    if shortest is None or len(shortest) > cap_nodes:
        raise UnreachableError(f"no admissible path {src}->{dst} within {hop_cap} hops")

    memo: dict[tuple[int, ...], float] = {}

    def fit(path: list[int]) -> float:
        key = tuple(path)
        if key not in memo:
            memo[key] = route_fitness(world, path) if len(path) <= cap_nodes else -math.inf
        return memo[key]

    pop: list[list[int]] = [shortest]
    greedy = _greedy_rich_path(world, src, dst, allowed, cap_nodes)
    if greedy is not None and len(greedy) <= cap_nodes:
        pop.append(greedy)
    for sr in seed_routes or []:
        repaired = _repair(world, list(sr), src, dst, allowed)
        if repaired is not None and len(repaired) <= cap_nodes:
            pop.append(repaired)
    while len(pop) < pop_n:
        cand = _random_walk(world, src, dst, allowed, cap_nodes, rng)
        if cand is None or len(cand) > cap_nodes:
            cand = shortest
        pop.append(cand)

    best = pop[0]
    for cand in pop[1:]:
        if _route_better(world, cand, fit(cand), best, fit(best)):
            best = cand

    for _ in range(gens):
        ranked = sorted(pop, key=lambda p: (-fit(p), len(p), p))
        next_pop = [list(p) for p in ranked[: ga.elites]]
        improved = _local_improve(world, ranked[0], allowed, cap_nodes, fit)
        if improved is not None:
            next_pop.append(improved)
        while len(next_pop) < pop_n:
            p1 = ranked[min(int(rng.integers(0, len(ranked))), int(rng.integers(0, len(ranked))))]
            p2 = ranked[min(int(rng.integers(0, len(ranked))), int(rng.integers(0, len(ranked))))]
            child = list(p1)
            if rng.random() < ga.crossover:
                child = _crossover(p1, p2, rng) or child
            if rng.random() < ga.mutation:
                child = _mutate(world, child, allowed, cap_nodes, rng) or child
            repaired = _repair(world, child, src, dst, allowed)
            next_pop.append(repaired if repaired is not None and len(repaired) <= cap_nodes else list(p1))
        pop = next_pop
        for cand in pop:
            if _route_better(world, cand, fit(cand), best, fit(best)):
                best = cand

    final = _local_improve(world, best, allowed, cap_nodes, fit, exhaust=True)
    if final is not None and _route_better(world, final, fit(final), best, fit(best)):
        best = final
    if min_len > 1:
        best = _pad_route(world, best, min_len, allowed) or best
    return Route(hops=best, planned_at=world.epoch_s)


def _crossover(p1: list[int], p2: list[int], rng) -> list[int] | None:
    """Splice at a site shared by both parents; no common site -> no-op."""
    common = [n for n in p1[1:-1] if n in set(p2[1:-1])]
    if not common:
        return None
    c = common[int(rng.integers(0, len(common)))]
    return p1[: p1.index(c)] + p2[p2.index(c):]

def _mutate(world, path: list[int], allowed, cap_nodes: int, rng) -> list[int] | None:
    """Rewire a random suffix through a fresh biased walk."""
    if len(path) < 2:
        return None
    i = int(rng.integers(0, len(path) - 1))
    walk = _random_walk(world, path[i], path[-1], allowed, cap_nodes, rng)
    if walk is None:
        return None
    return path[:i] + walk


def _local_improve(world, path: list[int], allowed, cap_nodes: int, fit, exhaust: bool = False):
    """Deterministic hill-climb: swap an interior node for a richer square-flip
    alternative, or delete a below-average interior node. Improves mean richness
    without losing validity."""
    cur = list(path)
    changed = True
    rounds = 0
    while changed and (exhaust or rounds < 2):
        changed = False
        rounds += 1
        i = 1
        while i < len(cur) - 1:
            a, x, b = cur[i - 1], cur[i], cur[i + 1]
            # deletion: a adjacent to b and x drags the mean down
            if len(cur) > 2 and world.are_adjacent(a, b):
                trial = cur[:i] + cur[i + 1:]
                if len(set(trial)) == len(trial) and fit(trial) > fit(cur):
                    cur = trial
                    changed = True
                    continue
            # square flip: replace x by the other common neighbor of a and b
            for alt in world.neighbors(a):
                if (
                    alt != x
                    and alt not in cur
                    and (allowed is None or alt in allowed)
                    and world.are_adjacent(alt, b)
                    and world.richness(alt) > world.richness(x)
                ):
                    trial = cur[:i] + [alt] + cur[i + 1:]
                    if fit(trial) > fit(cur):
                        cur = trial
                        changed = True
                        break
            i += 1
        # extension: graft a profitable 2-node detour anywhere along the path
        if len(cur) + 2 <= cap_nodes:
            best_trial = None
            for i in range(len(cur) - 1):
                a, b = cur[i], cur[i + 1]
                for x in world.neighbors(a):
                    if x in cur or (allowed is not None and x not in allowed):
                        continue
                    for y in world.neighbors(x):
                        if y in cur or y == x or (allowed is not None and y not in allowed):
                            continue
                        if world.are_adjacent(y, b):
                            trial = cur[: i + 1] + [x, y] + cur[i + 1:]
                            if fit(trial) > fit(best_trial if best_trial else cur):
                                best_trial = trial
            if best_trial is not None:
                cur = best_trial
                changed = True
    return cur if cur != list(path) else None


def _pad_route(world, hops: list[int], min_len: int, allowed) -> list[int] | None:
    """Append richest unvisited neighbors at the tail until min_len nodes."""
    out = list(hops)
    while len(out) < min_len:
        options = [n for n in _allowed_neighbors(world, out[-1], allowed) if n not in out]
        if not options:
            return None
        options.sort(key=lambda n: (-world.richness(n), n))
        out.append(options[0])
    return out


# -- baselines ----------------------------------------------------------------------


def plan_route_dijkstra(world: Constellation, src: int, dst: int, allowed=None) -> Route:
    """Centralized shortest-path planning by physical link distance."""
    if src == dst:
        raise ValueError("src and dst must differ")
    dist = {src: 0.0}
    parent: dict[int, int] = {}
    heap = [(0.0, src)]
    done = set()
    while heap:
        d, cur = heapq.heappop(heap)
        if cur in done:
            continue
        done.add(cur)
        if cur == dst:
            break
        for n in _allowed_neighbors(world, cur, allowed):
            nd = d + world.distance_m(cur, n)
            if n not in dist or nd < dist[n] - 1e-12 or (abs(nd - dist[n]) <= 1e-12 and cur < parent.get(n, 1 << 30)):
                dist[n] = nd
                parent[n] = cur
                heapq.heappush(heap, (nd, n))
    if dst not in done:
        raise UnreachableError(f"no path {src}->{dst}")
    path = [dst]
    while path[-1] != src:
        path.append(parent[path[-1]])
    return Route(hops=path[::-1], planned_at=world.epoch_s)


def plan_route_greedy_rich(
    world: Constellation, src: int, dst: int, hop_cap: int | None = None, allowed=None
) -> Route:
    """Opportunistic: always step to the richest unvisited neighbor."""
    cap_nodes = (hop_cap + 1) if hop_cap is not None else 2 * max(world.planes, world.per_plane) + 1
    path = _greedy_rich_path(world, src, dst, allowed, cap_nodes)
    if path is None:
        raise UnreachableError(f"no path {src}->{dst}")
    return Route(hops=path, planned_at=world.epoch_s)


def plan_route_random_hop(
    world: Constellation, src: int, dst: int, seed: int, hop_cap: int | None = None, allowed=None
) -> Route:
    """Random next-hop selection among unvisited candidates."""
    cap_nodes = (hop_cap + 1) if hop_cap is not None else 2 * max(world.planes, world.per_plane) + 1
    rng = rng_for(seed, TAG_ROUTE_RSH)
    path = [src]
    visited = {src}
    while path[-1] != dst and len(path) < cap_nodes:
        options = [n for n in _allowed_neighbors(world, path[-1], allowed) if n not in visited]
        if not options:
            break
        nxt = options[int(rng.integers(0, len(options)))]
        path.append(nxt)
        visited.add(nxt)
    if path[-1] != dst:
        tail = bfs_path(world, path[-1], dst, allowed, avoid=frozenset(path[:-1]))
        if tail is None:
            tail = bfs_path(world, path[-1], dst, allowed)
            if tail is None:
                raise UnreachableError(f"no path {src}->{dst}")
        path = _dedupe_loops(path + tail[1:])
    return Route(hops=path, planned_at=world.epoch_s)


# -- destination selection ------------------------------------------------------------


def choose_destination(
    world: Constellation,
    map_: RegionMap,
    src: int,
    k: int,
    mode: str = "k_hops",
    rng=None,
    allowed=None,
) -> int:
    """Pick the offload destination K-1 grid hops from src along the axis whose
    straight candidate chain has the best mean richness (N<S<E<W on ties).
    Falls back to the K-th nearest in-region satellite when no straight chain
    fits; `allowed` further confines candidates (neighborhood processing)."""
    region = int(map_.region_of[src])
    members = set(int(s) for s in map_.members(region))
    if allowed is not None:
        members &= set(allowed)
    if mode == "random":
        pool = sorted(members - {src})
        if not pool:
            raise UnreachableError(f"region {region} has no destination for {src}")
        return pool[int(rng.integers(0, len(pool)))] if rng is not None else pool[0]

    best_dir = None
    best_score = -math.inf
    for d in DIRECTIONS:
        chain = [src]
        for _ in range(k - 1):
            chain.append(world.step(chain[-1], d))
        if len(set(chain)) != k or any(c not in members for c in chain[1:]):
            continue
        score = sum(world.richness(c) for c in chain) / k
        if score > best_score:
            best_score = score
            best_dir = d
    if best_dir is not None:
        dst = src
        for _ in range(k - 1):
            dst = world.step(dst, best_dir)
        return dst

    # BFS fallback: the k-th nearest in-region satellite (deterministic order)
    seen = [src]
    frontier = [src]
    while frontier and len(seen) < k:
        nxt = []
        for sat in frontier:
            for n in world.neighbors(sat):
                if n in members and n not in seen:
                    seen.append(n)
                    nxt.append(n)
                    if len(seen) >= k:
                        break
            if len(seen) >= k:
                break
        frontier = nxt
    if len(seen) < 2:
        raise UnreachableError(f"region {region} too small for any destination from {src}")
    return seen[min(k - 1, len(seen) - 1)]


# -- cross-region two-phase planning ----------------------------------------------------


def plan_cross_region(
    world: Constellation,
    map_: RegionMap,
    src: int,
    dst: int,
    ga: GaRouteConfig,
    seed: int,
    hop_cap: int | None = None,
) -> Route:
    """Phase 1 routes src to the best boundary satellite of its region; phase 2
    routes that boundary into the destination's region. The junction satellite
    appears exactly once in the concatenation."""
    r_src = int(map_.region_of[src])
    r_dst = int(map_.region_of[dst])
    if r_src == r_dst:
        raise ValueError("endpoints share a region; use plan_route")
    boundary_cells = map_.boundary_sats(r_src, toward=r_dst)
    if not boundary_cells:
        raise NonAdjacentRegionError(f"regions {r_src} and {r_dst} are not adjacent")

    digests = exchange_neighborhood(map_, r_src)
    far_richness = 0.0
    for dg in digests.values():
        if dg.region_id == r_dst:
            far_richness = dg.richness_mean
            break
    boundary = max(
        boundary_cells,
        key=lambda b: (world.richness(b) + far_richness, -b),
    )

    src_members = set(int(s) for s in map_.members(r_src))
    far_members = set(int(s) for s in map_.members(r_dst)) | {boundary}
    if boundary == src:
        phase1 = [src]
    else:
        phase1 = plan_route(world, src, boundary, ga, seed, hop_cap, allowed=src_members).hops
    if boundary == dst:
        phase2 = [boundary]
    else:
        phase2 = plan_route(world, boundary, dst, ga, seed + 1, hop_cap, allowed=far_members).hops
    hops = phase1 + phase2[1:]
    if len(set(hops)) != len(hops):
        hops = _dedupe_loops(hops)
    return Route(hops=hops, planned_at=world.epoch_s, region_scope=(r_src, r_dst))


# -- adaptive transmission -----------------------------------------------------------


def predicted_hop_delay(
    world: Constellation, cur: int, nxt: int, payload_bytes: int
) -> float:
    """Serialization at the next hop's free link fraction plus propagation.
    A saturated next hop predicts an infinite delay."""
    free = 1.0 - float(world.r_used[nxt])
    if free <= 0.0 or world.energy_j[nxt] <= 0.0:
        return math.inf
    rate = world.isl_rate_bps(cur, nxt) * free
    return payload_bytes * 8.0 / rate + world.distance_m(cur, nxt) / C_LIGHT


def transmit_with_replanning(
    world: Constellation,
    route: Route,
    payload_bytes: int,
    thres_d_s: float,
    planner,
    max_replans: int = 10,
    on_hop=None,
) -> TransmitLog:
    """Walk the route hop by hop. Before each hop the per-hop delay is
    predicted from current resource state; a violation replans from the current
    satellite (and re-checks, so every realized hop satisfied the threshold at
    send time). Exceeding max_replans drops the payload. `on_hop(log, sat)`
    fires after each arrival, letting the caller perturb the network mid-flight."""
    src, dst = route.hops[0], route.hops[-1]
    log = TransmitLog(source=src, destination=dst, payload_bytes=payload_bytes)
    log.realized.append(src)
    cur_route = route.hops
    cur = src
    just_replanned = False
    while cur != dst:
        if cur not in cur_route or cur_route[-1] == cur:
            log.dropped = True
            log.drop_reason = "malformed-route"
            return log
        idx = cur_route.index(cur)
        nxt = cur_route[idx + 1]
        delay = predicted_hop_delay(world, cur, nxt, payload_bytes)
        if delay > thres_d_s:
            if log.replans >= max_replans:
                log.dropped = True
                log.drop_reason = "replan-storm"
                return log
            log.replans += 1
            just_replanned = True
            new_route = planner(cur, dst)
            cur_route = new_route.hops if isinstance(new_route, Route) else list(new_route)
            continue
        log.hop_records.append(
            HopRecord(
                hop_index=len(log.realized) - 1,
                sat=nxt,
                predicted_delay_s=delay,
                replanned=just_replanned,
            )
        )
        just_replanned = False
        log.realized.append(nxt)
        cur = nxt
        if on_hop is not None:
            on_hop(log, cur)
    return log


# -- exhaustive oracle (test support, small grids only) ------------------------------


def enumerate_best_route(
    world: Constellation, src: int, dst: int, hop_cap: int, allowed=None
) -> tuple[list[int], float]:
    """DFS over every simple path with <= hop_cap edges; returns the optimum
    under the planner's exact tie-break. Exponential; desk-scale oracles only."""
    best_path: list[int] | None = None
    best_fit = -math.inf
    path = [src]
    on_path = {src}
    sums = [world.richness(src)]

    def visit(cur: int):
        nonlocal best_path, best_fit
        if cur == dst:
            f = sums[-1] / len(path)
            nonlocal_path = list(path)
            if (
                best_path is None
                or f > best_fit
                or (f == best_fit and (len(nonlocal_path), nonlocal_path) < (len(best_path), best_path))
            ):
                best_fit = f
                best_path = nonlocal_path
            return
        if len(path) > hop_cap:
            return
        for n in _allowed_neighbors(world, cur, allowed):
            if n in on_path:
                continue
            path.append(n)
            on_path.add(n)
            sums.append(sums[-1] + world.richness(n))
            visit(n)
            sums.pop()
            on_path.discard(n)
            path.pop()

    visit(src)
    if best_path is None:
        raise UnreachableError(f"no path {src}->{dst} within {hop_cap} hops")
    return best_path, best_fit
