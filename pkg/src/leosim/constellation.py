"""Grid LEO constellation: torus topology, orbital positions, link rates,
and per-satellite compute/link/energy resources.

Satellites sit on a planes x per_plane grid. Flat id = plane * per_plane + slot.
Grid directions: N = previous plane, S = next plane (same slot),
E = next slot, W = previous slot (same plane). All four wrap (torus).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ConstellationConfig, LinkConfig
from .seeding import TAG_FADING, rng_for

C_LIGHT = 299792458.0  # m/s
K_BOLTZ = 1.380649e-23  # J/K
MU_EARTH = 3.986004418e14  # m^3/s^2
R_EARTH = 6371000.0  # m

NORTH, SOUTH, EAST, WEST = "N", "S", "E", "W"
DIRECTIONS = (NORTH, SOUTH, EAST, WEST)


@dataclass
class _Alloc:
    sat: int
    f_frac: float
    r_frac: float


class Constellation:
    """Mutable world state for one simulation run."""

    def __init__(self, cfg: ConstellationConfig, link: LinkConfig, seed: int = 0):
        self.cfg = cfg
        self.link = link
        self.seed = int(seed)
        self.planes = int(cfg.planes)
        self.per_plane = int(cfg.per_plane)
        if self.planes < 2 or self.per_plane < 2:
            raise ValueError("grid needs at least 2 planes and 2 satellites per plane")
        self.n_sats = self.planes * self.per_plane
        self.epoch_s = 0.0

        a = R_EARTH + cfg.altitude_m
        self.semi_major_m = a
        self.mean_motion = math.sqrt(MU_EARTH / a**3)  # rad/s
        self.period_s = 2.0 * math.pi / self.mean_motion
        self.inclination_rad = math.radians(cfg.inclination_deg)

        p = np.arange(self.n_sats) // self.per_plane
        s = np.arange(self.n_sats) % self.per_plane
        # polar-star spread: ascending nodes over half the equator
        self._raan = p * (math.pi / self.planes)
        self._phase0 = s * (2.0 * math.pi / self.per_plane)

        # fractional usage in [0, 1]; exact zero again once every allocation
        # is released because usage is recomputed from the live entries
        self.f_used = np.zeros(self.n_sats)
        self.r_used = np.zeros(self.n_sats)
        self.energy_j = np.full(self.n_sats, cfg.energy_j)
        self._allocs: dict[int, _Alloc] = {}
        self._by_sat: dict[int, list[int]] = {}
        self._next_alloc = 0

        self._fading_rng = rng_for(self.seed, TAG_FADING)

    # -- grid topology ------------------------------------------------------

    def flat_id(self, plane: int, slot: int) -> int:
        return (plane % self.planes) * self.per_plane + (slot % self.per_plane)

    def plane_of(self, sat: int) -> int:
        return sat // self.per_plane

    def slot_of(self, sat: int) -> int:
        return sat % self.per_plane

    def step(self, sat: int, direction: str) -> int:
        p, s = self.plane_of(sat), self.slot_of(sat)
        if direction == NORTH:
            return self.flat_id(p - 1, s)
        if direction == SOUTH:
            return self.flat_id(p + 1, s)
        if direction == EAST:
            return self.flat_id(p, s + 1)
        if direction == WEST:
            return self.flat_id(p, s - 1)
        raise ValueError(f"unknown direction {direction!r}")

    def _seam_blocked(self, i: int, j: int) -> bool:
        if not self.cfg.seam_links_off or self.planes < 2:
            return False
        pi, pj = self.plane_of(i), self.plane_of(j)
        return {pi, pj} == {0, self.planes - 1} and pi != pj

    def neighbors(self, sat: int) -> tuple[int, ...]:
        """Distinct grid neighbors in N, S, E, W order; 4 of them except on
        degenerate 2-wide axes where wrap-around collapses pairs."""
        out: list[int] = []
        for d in DIRECTIONS:
            n = self.step(sat, d)
            if n != sat and n not in out and not self._seam_blocked(sat, n):
                out.append(n)
        return tuple(out)

    def are_adjacent(self, i: int, j: int) -> bool:
        return j in self.neighbors(i)

    # -- orbital positions --------------------------------------------------

    def positions_at(self, t_s: float) -> np.ndarray:
        """ECI positions, meters, shape (n_sats, 3)."""
        u = self._phase0 + self.mean_motion * t_s
        a = self.semi_major_m
        ci, si = math.cos(self.inclination_rad), math.sin(self.inclination_rad)
        xo, yo = a * np.cos(u), a * np.sin(u)
        # Rz(raan) @ Rx(incl) @ [xo, yo, 0]
        cr, sr = np.cos(self._raan), np.sin(self._raan)
        x = cr * xo - sr * ci * yo
        y = sr * xo + cr * ci * yo
        z = si * yo
        return np.column_stack([x, y, z])

    def positions(self) -> np.ndarray:
        return self.positions_at(self.epoch_s)

    def position(self, sat: int) -> np.ndarray:
        return self.positions()[sat]

    def distance_m(self, i: int, j: int) -> float:
        pos = self.positions()
        return float(np.linalg.norm(pos[i] - pos[j]))

    def advance_time(self, dt_s: float) -> "Constellation":
        """Move the epoch forward. Resource usage is untouched."""
        if dt_s <= 0:
            raise ValueError("dt_s must be positive")
        self.epoch_s += float(dt_s)
        return self

    # -- link rates ----------------------------------------------------------

    def isl_rate_bps(self, i: int, j: int) -> float:
        """Shannon capacity of the inter-satellite laser link i -> j."""
        if i == j or not self.are_adjacent(i, j):
            raise ValueError(f"satellites {i} and {j} share no link")
        lk = self.link
        snr = (lk.tx_power_w * lk.antenna_gain * lk.antenna_gain
               * lk.pointing_loss * lk.pointing_loss
               / (K_BOLTZ * lk.noise_temp_k * lk.bandwidth_hz))
        return lk.bandwidth_hz * math.log2(1.0 + snr)

    def uplink_rate_bps(self, distance_m: float, fading: bool = False) -> float:
        """Shannon capacity of a ground-to-satellite link at slant range d."""
        if distance_m <= 0:
            raise ValueError("uplink distance must be positive")
        lk = self.link
        lam = C_LIGHT / lk.carrier_hz
        gain = (lam / (4.0 * math.pi * distance_m)) ** 2
        if fading and lk.fading == "lognormal":
            gain *= math.exp(self._fading_rng.normal(0.0, lk.fading_sigma))
        snr = lk.uplink_power_w * gain / lk.uplink_noise_w
        return lk.uplink_bandwidth_hz * math.log2(1.0 + snr)

    # -- ground visibility ----------------------------------------------------

    def station_ecef(self, lat_deg: float, lon_deg: float) -> np.ndarray:
        lat, lon = math.radians(lat_deg), math.radians(lon_deg)
        return R_EARTH * np.array(
            [math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat)]
        )

    def visible_sats(self, lat_deg: float, lon_deg: float) -> list[tuple[int, float]]:
        """Satellites above the elevation mask, as (sat, slant_range_m),
        nearest first; flat-id order breaks ties."""
        g = self.station_ecef(lat_deg, lon_deg)
        up = g / np.linalg.norm(g)
        rel = self.positions() - g
        rng = np.linalg.norm(rel, axis=1)
        sin_el = rel @ up / rng
        mask = sin_el >= math.sin(math.radians(self.link.elevation_mask_deg))
        order = sorted(np.flatnonzero(mask), key=lambda i: (rng[i], i))
        return [(int(i), float(rng[i])) for i in order]

    # -- resources -------------------------------------------------------------

    def richness(self, sat: int) -> float:
        """Available compute fraction plus available link fraction; a drained
        battery makes a satellite worthless as a host or relay."""
        if self.energy_j[sat] <= 0.0:
            return 0.0
        return float((1.0 - self.f_used[sat]) + (1.0 - self.r_used[sat]))

    def richness_all(self) -> np.ndarray:
        u = (1.0 - self.f_used) + (1.0 - self.r_used)
        u[self.energy_j <= 0.0] = 0.0
        return u

    def allocate(self, sat: int, f_frac: float, r_frac: float) -> int:
        """Reserve fractions of a satellite's compute and link capacity.
        Returns a handle for release()."""
        if f_frac < 0 or r_frac < 0:
            raise ValueError("allocation fractions must be nonnegative")
        if self.f_used[sat] + f_frac > 1.0 + 1e-12 or self.r_used[sat] + r_frac > 1.0 + 1e-12:
            raise ValueError(f"satellite {sat} over-committed")
        handle = self._next_alloc
        self._next_alloc += 1
        self._allocs[handle] = _Alloc(sat, float(f_frac), float(r_frac))
        self._by_sat.setdefault(sat, []).append(handle)
        self._recompute_usage(sat)
        return handle

    def release(self, handle: int) -> None:
        alloc = self._allocs.pop(handle)
        self._by_sat[alloc.sat].remove(handle)
        self._recompute_usage(alloc.sat)

    def _recompute_usage(self, sat: int) -> None:
        # summing the live entries (not incremental +=/-=) keeps usage exact:
        # an empty entry list always yields exactly 0.0
        handles = self._by_sat.get(sat, ())
        self.f_used[sat] = math.fsum(self._allocs[h].f_frac for h in handles)
        self.r_used[sat] = math.fsum(self._allocs[h].r_frac for h in handles)

    def open_allocations(self) -> int:
        return len(self._allocs)

    def consume_energy(self, sat: int, joules: float) -> None:
        if joules < 0:
            raise ValueError("energy draw must be nonnegative")
        self.energy_j[sat] -= joules

    def clone(self, reset_resources: bool = True) -> "Constellation":
        """Independent copy for scratch evaluations."""
        c = Constellation(self.cfg, self.link, seed=self.seed)
        c.epoch_s = self.epoch_s
        if not reset_resources:
            c.f_used = self.f_used.copy()
            c.r_used = self.r_used.copy()
            c.energy_j = self.energy_j.copy()
            c._allocs = {h: _Alloc(a.sat, a.f_frac, a.r_frac) for h, a in self._allocs.items()}
            c._by_sat = {s: list(hs) for s, hs in self._by_sat.items()}
            c._next_alloc = self._next_alloc
        return c
