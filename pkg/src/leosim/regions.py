"""Rectangular region partitioning of the satellite grid: genetic search over
region dimensions, congestion-triggered re-division, and neighbor digests.

Fitness is injected as a callable (the engine builds it from a scratch
simulation over the predicted batch), so this module stays import-free of the
engine. All GAs memoize fitness per chromosome: the search is deterministic
under a fixed seed and equals exhaustive enumeration when it covers the space.

Orientation: l extends along the slot axis, w along the plane axis. Region
bounds are inclusive (plane_lo, plane_hi, slot_lo, slot_hi) rectangles; after
re-division the adopted leftovers may make regions non-rectangular, while the
partition invariant (every satellite in exactly one region) always holds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import GaDivConfig
from .constellation import DIRECTIONS, EAST, NORTH, SOUTH, WEST
from .seeding import TAG_DIV_GA, rng_for


class InfeasibleBoundsError(ValueError):
    """K exceeds the ceil(sqrt(N)) chromosome upper bound."""


class NoFeasibleResizeError(RuntimeError):
    """Every re-division candidate violates neighbor-size constraints."""


@dataclass
class RegionStats:
    failure_rate: float = 0.0
    avg_delay: float = 0.0
    richness_mean: float = 2.0
    populated: bool = False


@dataclass
class NeighborDigest:
    region_id: int
    failure_rate: float
    avg_delay: float
    richness_mean: float


@dataclass
class RegionMap:
    planes: int
    per_plane: int
    region_of: np.ndarray  # flat sat id -> region id
    bounds: dict[int, tuple[int, int, int, int]]
    load_stats: dict[int, RegionStats] = field(default_factory=dict)

    @property
    def n_regions(self) -> int:
        return len(self.bounds)

    @property
    def n_sats(self) -> int:
        return self.planes * self.per_plane

    def region_ids(self) -> list[int]:
        return sorted(self.bounds)

    def members(self, region_id: int) -> np.ndarray:
        return np.flatnonzero(self.region_of == region_id)

    def stats(self, region_id: int) -> RegionStats:
        return self.load_stats.setdefault(region_id, RegionStats())

    def _step(self, sat: int, direction: str) -> int:
        p, s = divmod(sat, self.per_plane)
        if direction == NORTH:
            p -= 1
        elif direction == SOUTH:
            p += 1
        elif direction == EAST:
            s += 1
        elif direction == WEST:
            s -= 1
        return (p % self.planes) * self.per_plane + (s % self.per_plane)

    def neighbor_regions(self, region_id: int) -> list[int]:
        found = set()
        for sat in self.members(region_id):
            for d in DIRECTIONS:
                r = int(self.region_of[self._step(int(sat), d)])
                if r != region_id:
                    found.add(r)
        return sorted(found)

    def boundary_sats(self, region_id: int, toward: int) -> list[int]:
        """Members of region_id with at least one grid neighbor in region `toward`."""
        out = []
        for sat in self.members(region_id):
            for d in DIRECTIONS:
                if int(self.region_of[self._step(int(sat), d)]) == toward:
                    out.append(int(sat))
                    break
        return out

    def diameter(self, region_id: int) -> int:
        cells = self.members(region_id)
        planes = {int(c) // self.per_plane for c in cells}
        slots = {int(c) % self.per_plane for c in cells}
        return max(len(planes) - 1, 0) + max(len(slots) - 1, 0)

    def validate_partition(self) -> None:
        if (self.region_of < 0).any():
            raise AssertionError("uncovered satellite in region map")
        present = set(int(r) for r in np.unique(self.region_of))
        if present != set(self.bounds):
            raise AssertionError(f"bounds/assignment mismatch: {present} vs {set(self.bounds)}")

    def copy(self) -> "RegionMap":
        return RegionMap(
            self.planes,
            self.per_plane,
            self.region_of.copy(),
            dict(self.bounds),
            {k: RegionStats(v.failure_rate, v.avg_delay, v.richness_mean, v.populated)
             for k, v in self.load_stats.items()},
        )


def chromosome_bounds(n_sats: int, k: int) -> tuple[int, int]:
    """Inclusive (lo, hi) for both l and w."""
    hi = math.ceil(math.sqrt(n_sats))
    if k > hi:
        raise InfeasibleBoundsError(f"K={k} exceeds ceil(sqrt(N))={hi}")
    return k, hi


def uniform_map(planes: int, per_plane: int, l: int, w: int) -> RegionMap:
    """Tile the torus into l x w bricks; the last brick in each axis absorbs
    the remainder when the axis length is not divisible."""
    l = max(1, min(int(l), per_plane))
    w = max(1, min(int(w), planes))
    plane_cuts = list(range(0, planes, w))
    slot_cuts = list(range(0, per_plane, l))
    # a trailing sliver shorter than the brick merges into the previous brick
    if len(plane_cuts) > 1 and planes - plane_cuts[-1] < w:
        plane_cuts.pop()
    if len(slot_cuts) > 1 and per_plane - slot_cuts[-1] < l:
        slot_cuts.pop()
    region_of = np.full(planes * per_plane, -1, dtype=np.int64)
    bounds: dict[int, tuple[int, int, int, int]] = {}
    rid = 0
    for bi, p_lo in enumerate(plane_cuts):
        p_hi = (plane_cuts[bi + 1] - 1) if bi + 1 < len(plane_cuts) else planes - 1
        for bj, s_lo in enumerate(slot_cuts):
            s_hi = (slot_cuts[bj + 1] - 1) if bj + 1 < len(slot_cuts) else per_plane - 1
            for p in range(p_lo, p_hi + 1):
                for s in range(s_lo, s_hi + 1):
                    region_of[p * per_plane + s] = rid
            bounds[rid] = (p_lo, p_hi, s_lo, s_hi)
            rid += 1
    return RegionMap(planes, per_plane, region_of, bounds)


def single_region_map(planes: int, per_plane: int) -> RegionMap:
    region_of = np.zeros(planes * per_plane, dtype=np.int64)
    return RegionMap(planes, per_plane, region_of, {0: (0, planes - 1, 0, per_plane - 1)})


# -- division GA -----------------------------------------------------------------


def _div_better(a: tuple[float, int, int], b: tuple[float, int, int]) -> bool:
    """(fitness, l, w): higher fitness wins; ties prefer smaller l*w, then smaller l."""
    fa, la, wa = a
    fb, lb, wb = b
    if fa != fb:
        return fa > fb
    if la * wa != lb * wb:
        return la * wa < lb * wb
    return la < lb


def ga_divide(
    fitness_fn,
    n_sats: int,
    k: int,
    cfg: GaDivConfig,
    seed: int,
    planes: int | None = None,
    per_plane: int | None = None,
) -> tuple[int, int, float]:
    """Genetic search over (l, w). Returns (l, w, fitness) of the best found.
    fitness_fn(l, w) must be deterministic; it is memoized here."""
    lo, hi = chromosome_bounds(n_sats, k)
    hi_l = min(hi, per_plane) if per_plane else hi
    hi_w = min(hi, planes) if planes else hi
    lo_l, lo_w = min(lo, hi_l), min(lo, hi_w)
    rng = rng_for(seed, TAG_DIV_GA)
    memo: dict[tuple[int, int], float] = {}

    def fit(l: int, w: int) -> float:
        key = (l, w)
        if key not in memo:
            memo[key] = float(fitness_fn(l, w))
        return memo[key]

    pop = [
        (int(rng.integers(lo_l, hi_l + 1)), int(rng.integers(lo_w, hi_w + 1)))
        for _ in range(cfg.population)
    ]
    best = (fit(*pop[0]), pop[0][0], pop[0][1])
    for cand in pop[1:]:
        trial = (fit(*cand), cand[0], cand[1])
        if _div_better(trial, best):
            best = trial
    for _ in range(cfg.generations):
        scored = sorted(
            ((fit(l, w), l, w) for (l, w) in pop),
            key=lambda t: (-t[0], t[1] * t[2], t[1]),
        )
        next_pop = [(l, w) for (_, l, w) in scored[: cfg.elites]]
        while len(next_pop) < cfg.population:
            p1 = _tournament(scored, rng)
            p2 = _tournament(scored, rng)
            if rng.random() < cfg.crossover:
                child = (p1[0], p2[1])  # swap traits across parents
            else:
                child = p1
            l, w = child
            if rng.random() < cfg.mutation:
                l = int(np.clip(l + rng.choice([-1, 1]), lo_l, hi_l))
            if rng.random() < cfg.mutation:
                w = int(np.clip(w + rng.choice([-1, 1]), lo_w, hi_w))
            next_pop.append((l, w))
        pop = next_pop
        for cand in pop:
            trial = (fit(*cand), cand[0], cand[1])
            if _div_better(trial, best):
                best = trial
    return best[1], best[2], best[0]


def _tournament(scored: list[tuple[float, int, int]], rng, size: int = 3) -> tuple[int, int]:
    picks = [scored[int(rng.integers(0, len(scored)))] for _ in range(size)]
    winner = picks[0]
    for p in picks[1:]:
        if _div_better(p, winner):
            winner = p
    return winner[1], winner[2]


def exhaustive_divide(
    fitness_fn,
    n_sats: int,
    k: int,
    planes: int | None = None,
    per_plane: int | None = None,
    squares_only: bool = False,
) -> tuple[int, int, float]:
    """Enumerate every (l, w) candidate with the GA's tie-break; ground truth
    for the oracle-equivalence gate and the square-enumeration baseline."""
    lo, hi = chromosome_bounds(n_sats, k)
    hi_l = min(hi, per_plane) if per_plane else hi
    hi_w = min(hi, planes) if planes else hi
    best: tuple[float, int, int] | None = None
    for l in range(min(lo, hi_l), hi_l + 1):
        for w in range(min(lo, hi_w), hi_w + 1):
            if squares_only and l != w:
                continue
            trial = (float(fitness_fn(l, w)), l, w)
            if best is None or _div_better(trial, best):
                best = trial
    assert best is not None
    return best[1], best[2], best[0]


# -- re-division -------------------------------------------------------------------


_DIR_ORDER = {NORTH: 0, SOUTH: 1, EAST: 2, WEST: 3}


def apply_redivision(
    base: RegionMap, region_id: int, l: int, w: int, direction: str, k: int
) -> RegionMap | None:
    """Resize region_id to w planes x l slots, growing/shrinking toward
    `direction` (the opposite edge stays anchored). Cells the region abandons
    are adopted by the nearest remaining region; cells it gains are taken from
    the overlapped neighbors. Returns None when any neighbor would drop below
    K distinct planes or slots, or would vanish."""
    p_lo, p_hi, s_lo, s_hi = base.bounds[region_id]
    planes, per_plane = base.planes, base.per_plane
    l = min(l, per_plane)
    w = min(w, planes)
    if direction == NORTH:  # grow toward smaller plane index, anchor south edge
        new_p_hi, new_p_lo = p_hi, p_hi - w + 1
        new_s_lo, new_s_hi = s_lo, s_lo + l - 1
    elif direction == SOUTH:
        new_p_lo, new_p_hi = p_lo, p_lo + w - 1
        new_s_lo, new_s_hi = s_lo, s_lo + l - 1
    elif direction == EAST:
        new_s_lo, new_s_hi = s_lo, s_lo + l - 1
        new_p_lo, new_p_hi = p_lo, p_lo + w - 1
    elif direction == WEST:
        new_s_hi, new_s_lo = s_hi, s_hi - l + 1
        new_p_lo, new_p_hi = p_lo, p_lo + w - 1
    else:
        raise ValueError(f"unknown direction {direction!r}")

    new_cells = {
        (p % planes) * per_plane + (s % per_plane)
        for p in range(new_p_lo, new_p_hi + 1)
        for s in range(new_s_lo, new_s_hi + 1)
    }
    out = base.copy()
    old_cells = {int(c) for c in base.members(region_id)}
    abandoned = old_cells - new_cells
    for cell in sorted(new_cells):
        out.region_of[cell] = region_id

    # adopt abandoned cells into adjacent surviving regions, deterministically
    pending = set(abandoned)
    while pending:
        progressed = False
        for cell in sorted(pending):
            candidates = []
            for d in DIRECTIONS:
                n = out._step(cell, d)
                if n in pending:
                    continue
                r = int(out.region_of[n])
                if r != region_id or n in new_cells:
                    if r != region_id:
                        candidates.append(r)
            if candidates:
                out.region_of[cell] = min(candidates)
                pending.discard(cell)
                progressed = True
        if not progressed:
            # pocket fully enclosed by the resized region: fold it back in
            for cell in pending:
                out.region_of[cell] = region_id
            break

    # feasibility: every other region keeps >= k distinct planes and slots
    for rid in base.region_ids():
        if rid == region_id:
            continue
        cells = np.flatnonzero(out.region_of == rid)
        if len(cells) == 0:
            return None
        ps = {int(c) // per_plane for c in cells}
        ss = {int(c) % per_plane for c in cells}
        if len(ps) < min(k, planes) or len(ss) < min(k, per_plane):
            return None

    out.bounds[region_id] = (
        new_p_lo % planes,
        new_p_hi % planes,
        new_s_lo % per_plane,
        new_s_hi % per_plane,
    )
    out.validate_partition()
    return out


def ga_redivide(
    base: RegionMap,
    region_id: int,
    fitness_fn,
    k: int,
    cfg: GaDivConfig,
    seed: int,
) -> tuple[RegionMap, tuple[int, int, str], float]:
    """Genetic search over (l, w, dir) re-division candidates. fitness_fn takes
    a candidate RegionMap and returns a scalar. Raises NoFeasibleResizeError
    when nothing is feasible."""
    lo, hi = chromosome_bounds(base.n_sats, k)
    hi_l = min(hi, base.per_plane)
    hi_w = min(hi, base.planes)
    rng = rng_for(seed, TAG_DIV_GA, region_id + 1)
    memo: dict[tuple[int, int, str], tuple[float, RegionMap | None]] = {}

    def fit(l: int, w: int, d: str) -> tuple[float, RegionMap | None]:
        key = (l, w, d)
        if key not in memo:
            cand = apply_redivision(base, region_id, l, w, d, k)
            memo[key] = (-math.inf, None) if cand is None else (float(fitness_fn(cand)), cand)
        return memo[key]

    def better(a: tuple[float, int, int, str], b: tuple[float, int, int, str]) -> bool:
        if a[0] != b[0]:
            return a[0] > b[0]
        if a[1] * a[2] != b[1] * b[2]:
            return a[1] * a[2] < b[1] * b[2]
        if a[1] != b[1]:
            return a[1] < b[1]
        return _DIR_ORDER[a[3]] < _DIR_ORDER[b[3]]

    pop = [
        (
            int(rng.integers(min(lo, hi_l), hi_l + 1)),
            int(rng.integers(min(lo, hi_w), hi_w + 1)),
            DIRECTIONS[int(rng.integers(0, 4))],
        )
        for _ in range(cfg.population)
    ]
    best: tuple[float, int, int, str] | None = None
    for gen in range(cfg.generations + 1):
        for (l, w, d) in pop:
            score, _ = fit(l, w, d)
            trial = (score, l, w, d)
            if best is None or better(trial, best):
                best = trial
        if gen == cfg.generations:
            break
        scored = sorted(
            pop,
            key=lambda c: (-fit(*c)[0], c[0] * c[1], c[0], _DIR_ORDER[c[2]]),
        )
        next_pop = list(scored[: cfg.elites])
        while len(next_pop) < cfg.population:
            p1 = scored[min(int(rng.integers(0, len(scored))), int(rng.integers(0, len(scored))))]
            p2 = scored[min(int(rng.integers(0, len(scored))), int(rng.integers(0, len(scored))))]
            child = [p1[0], p2[1], (p1[2] if rng.random() < 0.5 else p2[2])]
            if rng.random() < cfg.mutation:
                child[0] = int(np.clip(child[0] + rng.choice([-1, 1]), min(lo, hi_l), hi_l))
            if rng.random() < cfg.mutation:
                child[1] = int(np.clip(child[1] + rng.choice([-1, 1]), min(lo, hi_w), hi_w))
            if rng.random() < cfg.mutation:
                child[2] = DIRECTIONS[int(rng.integers(0, 4))]
            next_pop.append((child[0], child[1], child[2]))
        pop = next_pop
    assert best is not None
    if not math.isfinite(best[0]):
        raise NoFeasibleResizeError(f"region {region_id}: no feasible resize")
    _, final_map = fit(best[1], best[2], best[3])
    assert final_map is not None
    return final_map, (best[1], best[2], best[3]), best[0]


# -- digests and triggers ---------------------------------------------------------


def exchange_neighborhood(map_: RegionMap, region_id: int) -> dict[str, NeighborDigest]:
    """Per-direction digest of the adjacent region, as seen from region_id's
    boundary satellites. The majority adjacent region along each direction is
    reported (smallest region id on ties); directions with no foreign neighbor
    are omitted. A single-region map exchanges nothing."""
    out: dict[str, NeighborDigest] = {}
    members = map_.members(region_id)
    for d in DIRECTIONS:
        counts: dict[int, int] = {}
        for sat in members:
            r = int(map_.region_of[map_._step(int(sat), d)])
            if r != region_id:
                counts[r] = counts.get(r, 0) + 1
        if not counts:
            continue
        rid = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        st = map_.stats(rid)
        out[d] = NeighborDigest(rid, st.failure_rate, st.avg_delay, st.richness_mean)
    return out


def should_redivide(
    region_id: int, map_: RegionMap, thr_tfr: float, delay_factor: float
) -> bool:
    """Trigger on failure rate above threshold, or average delay far above the
    neighbors' mean. Missing statistics never trigger."""
    st = map_.load_stats.get(region_id)
    if st is None or not st.populated:
        return False
    if st.failure_rate > thr_tfr:
        return True
    digests = exchange_neighborhood(map_, region_id)
    delays = [
        dg.avg_delay
        for dg in digests.values()
        if map_.stats(dg.region_id).populated
    ]
    if not delays:
        return False
    return st.avg_delay > delay_factor * (sum(delays) / len(delays))
