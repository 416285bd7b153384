"""Deterministic synthetic cities, disaster fields, and ground-truth mobility.

Normal mobility follows an exploration / preferential-return process anchored
on per-user home and work cells.  Disaster mobility thins each out-of-home
visit with probability 1 - H(i, t), substituting a stay at home, so the
generating law is exactly the hyperbolic decay model and fitting has a known
answer.  Everything is a pure function of (config, seed): per-user Philox
substreams keep simulation reproducible and order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CityDataset, DisasterField, GridSpec, Trajectory
from .errors import InvalidInputError
from .physics import DecayParams, build_kernel, decay_ratio_matrix
from .rng import substream


@dataclass(frozen=True)
class WorldConfig:
    """Parameters of one synthetic city's population and mobility process."""

    grid: GridSpec
    n_users: int
    home_work_fraction: float
    epr_rho: float
    epr_gamma: float
    seed: int
    name: str = "city"

    def __post_init__(self):
        if self.n_users < 1:
            raise InvalidInputError("n_users must be >= 1")
        if not 0.0 <= self.home_work_fraction <= 1.0:
            raise InvalidInputError("home_work_fraction must be in [0, 1]")
        if self.epr_rho < 0 or self.epr_gamma < 0:
            raise InvalidInputError("epr parameters must be >= 0")


@dataclass(frozen=True)
class DisasterScenario:
    """Shape of the exogenous hazard plus the generating decay parameters."""

    epicenter: int
    peak_intensity: float
    spatial_sigma_km: float
    onset_slot: int
    duration_slots: int
    truth_decay: DecayParams
    disaster_type: str = "generic"
    unit: str = ""

    def __post_init__(self):
        if self.peak_intensity <= 0:
            raise InvalidInputError("peak_intensity must be > 0")
        if self.spatial_sigma_km <= 0:
            raise InvalidInputError("spatial_sigma_km must be > 0")
        if self.duration_slots < 1:
            raise InvalidInputError("duration_slots must be >= 1")
        if self.onset_slot < 0:
            raise InvalidInputError("onset_slot must be >= 0")


@dataclass(frozen=True)
class City:
    """Static geography: cell attractiveness and per-user anchors."""

    config: WorldConfig
    attractiveness: np.ndarray  # (L,), positive, sums to 1
    user_ids: tuple[str, ...]
    homes: dict[str, int]
    works: dict[str, int]

    @property
    def grid(self) -> GridSpec:
        return self.config.grid


def _user_ids(n_users: int) -> tuple[str, ...]:
    width = max(4, len(str(n_users - 1)))
    return tuple(f"u{idx:0{width}d}" for idx in range(n_users))


def make_city(config: WorldConfig) -> City:
    """Generate attractiveness and home/work anchors; bit-identical per seed.

    Attractiveness peaks near the grid center with lognormal roughness and is
    normalized to sum 1.  Work anchors concentrate on attractive cells; homes
    are drawn from a flatter mixture so residential mass spreads out.
    """
    grid = config.grid
    if grid.n_cells < 1:
        raise InvalidInputError("zero-area grid")
    rng = substream(config.seed, "city")
    centers = grid.cell_center_km(np.arange(grid.n_cells))
    mid = np.array([grid.cols, grid.rows]) * grid.cell_km / 2.0
    extent = max(grid.rows, grid.cols) * grid.cell_km
    d_mid = np.linalg.norm(centers - mid, axis=1)
    base = np.exp(-(d_mid**2) / (2.0 * (0.35 * extent) ** 2 + 1e-12))
    rough = np.exp(0.5 * rng.standard_normal(grid.n_cells))
    attractiveness = base * rough
    attractiveness = attractiveness / attractiveness.sum()

    user_ids = _user_ids(config.n_users)
    home_w = attractiveness**0.3
    home_w = home_w / home_w.sum()
    homes_arr = rng.choice(grid.n_cells, size=config.n_users, p=home_w)
    works_arr = rng.choice(grid.n_cells, size=config.n_users, p=attractiveness)
    homes, works = {}, {}
    for uid, home, work in zip(user_ids, homes_arr.tolist(), works_arr.tolist()):
        if work == home and grid.n_cells > 1:
            work = (home + 1) % grid.n_cells
        homes[uid] = home
        works[uid] = work
    return City(config, attractiveness, user_ids, homes, works)


def make_disaster(scenario: DisasterScenario, grid: GridSpec) -> DisasterField:
    """Gaussian spatial bump around the epicenter, constant over the pulse
    window [onset, onset + duration), zero elsewhere."""
    if scenario.epicenter >= grid.n_cells:
        raise InvalidInputError("epicenter outside the grid")
    d = grid.cell_distance_km(np.arange(grid.n_cells), scenario.epicenter)
    spatial = scenario.peak_intensity * np.exp(
        -(d**2) / (2.0 * scenario.spatial_sigma_km**2)
    )
    pulse = np.zeros(grid.n_slots)
    end = min(scenario.onset_slot + scenario.duration_slots, grid.n_slots)
    pulse[scenario.onset_slot : end] = 1.0
    return DisasterField(
        spatial[:, None] * pulse[None, :],
        onset_slot=scenario.onset_slot,
        disaster_type=scenario.disaster_type,
        unit=scenario.unit,
    )


def _simulate_user(
    grid: GridSpec,
    attractiveness: np.ndarray,
    home: int,
    work: int,
    config: WorldConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    T = grid.n_slots
    locs = np.empty(T, dtype=np.int64)
    night = grid.is_night(np.arange(T))
    u_work = rng.random(T)
    u_explore = rng.random(T)
    visits = np.zeros(grid.n_cells, dtype=np.float64)
    n_seen = 0
    for t in range(T):
        if night[t]:
            cell = home
        elif u_work[t] < config.home_work_fraction:
            cell = work
        else:
            p_new = 1.0 if n_seen == 0 else min(config.epr_rho * n_seen**-config.epr_gamma, 1.0)
            if u_explore[t] < p_new:
                weights = np.where(visits > 0, 0.0, attractiveness)
                total = weights.sum()
                if total > 0:
                    cum = np.cumsum(weights)
                    cell = int(np.searchsorted(cum, rng.random() * total, side="right"))
                else:  # everything already visited
                    cum = np.cumsum(visits)
                    cell = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            else:
                cum = np.cumsum(visits)
                cell = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        if visits[cell] == 0:
            n_seen += 1
        visits[cell] += 1.0
        locs[t] = cell
    return locs


def simulate_normal(city: City) -> list[Trajectory]:
    """Dense normal-scenario trajectories for every user, one per user."""
    config = city.config
    grid = city.grid
    slots = np.arange(grid.n_slots, dtype=np.int64)
    trajs = []
    for uid in city.user_ids:
        rng = substream(config.seed, "normal", uid)
        locs = _simulate_user(
            grid, city.attractiveness, city.homes[uid], city.works[uid], config, rng
        )
        trajs.append(Trajectory(uid, slots.copy(), locs))
    return trajs


def simulate_disaster(
    city: City,
    normal: list[Trajectory],
    scenario: DisasterScenario,
    grid: GridSpec,
) -> list[Trajectory]:
    """Thin out-of-home visits: a point at (t, i) survives with probability
    H(i, t), otherwise the user stays home.  Home points are exempt, so the
    expected out-of-home flow at (i, t) is H(i, t) times the normal one."""
    if grid != city.grid:
        raise InvalidInputError("grid does not match the city")
    field = make_disaster(scenario, grid)
    kernel = build_kernel(grid, scenario.truth_decay.rho_km)
    H = decay_ratio_matrix(scenario.truth_decay, kernel, field)
    out = []
    for traj in normal:
        traj.validate_against(grid)
        home = city.homes[traj.user_id]
        rng = substream(city.config.seed, "disaster", traj.user_id)
        draws = rng.random(len(traj))
        keep = draws < H[traj.locs, traj.slots]
        locs = np.where((traj.locs == home) | keep, traj.locs, home)
        out.append(Trajectory(traj.user_id, traj.slots.copy(), locs))
    return out


def make_splits(
    user_ids: tuple[str, ...], seed: int, fractions: tuple[float, float] = (0.7, 0.15)
) -> tuple[frozenset[str], frozenset[str], frozenset[str]]:
    """Disjoint train/val/test user splits covering everyone."""
    rng = substream(seed, "splits")
    order = list(user_ids)
    rng.shuffle(order)
    n = len(order)
    n_train = max(1, int(round(fractions[0] * n)))
    n_val = max(1, int(round(fractions[1] * n))) if n - n_train >= 2 else max(0, n - n_train - 1)
    n_train = min(n_train, n - min(2, n - 1))
    train = frozenset(order[:n_train])
    val = frozenset(order[n_train : n_train + n_val])
    test = frozenset(order[n_train + n_val :])
    return train, val, test


def build_city_dataset(config: WorldConfig, scenario: DisasterScenario) -> CityDataset:
    """Full generation pipeline for one city: geography, normal and disaster
    trajectories, field, and user splits."""
    city = make_city(config)
    normal = simulate_normal(city)
    disaster = simulate_disaster(city, normal, scenario, config.grid)
    field = make_disaster(scenario, config.grid)
    train, val, test = make_splits(city.user_ids, config.seed)
    return CityDataset(
        name=config.name,
        grid=config.grid,
        normal=tuple(normal),
        disaster=tuple(disaster),
        field=field,
        train_users=train,
        val_users=val,
        test_users=test,
        homes=dict(city.homes),
    )
