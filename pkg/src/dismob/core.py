"""Domain types for grids, trajectories, disaster fields and flows, plus the
per-trajectory behavioral statistics used everywhere downstream.

Locations are grid cells indexed row-major; all distances are Euclidean
kilometers between cell centers.  Trajectories are dense: one point per slot
over a contiguous slot range.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError

# Night window used by the synthetic world and by home inference:
# before 07:00 and from 22:00 on.
NIGHT_END_MINUTE = 420
NIGHT_START_MINUTE = 1320


@dataclass(frozen=True)
class GridSpec:
    """Uniform rectangular grid with a fixed slotting of time."""

    rows: int
    cols: int
    cell_km: float
    slots_per_day: int
    days: int
    slot_minutes: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise InvalidInputError("grid must have at least one cell")
        if self.cell_km <= 0:
            raise InvalidInputError("cell_km must be positive")
        if self.days < 1:
            raise InvalidInputError("days must be >= 1")
        if self.slots_per_day * self.slot_minutes != 1440:
            raise InvalidInputError(
                "slots_per_day * slot_minutes must equal 1440, got "
                f"{self.slots_per_day} * {self.slot_minutes}"
            )

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def n_slots(self) -> int:
        return self.days * self.slots_per_day

    def cell_center_km(self, loc: int | np.ndarray) -> np.ndarray:
        """(x, y) kilometer coordinates of cell centers, shape (..., 2)."""
        loc = np.asarray(loc)
        r, c = np.divmod(loc, self.cols)
        return np.stack([(c + 0.5) * self.cell_km, (r + 0.5) * self.cell_km], axis=-1)

    def cell_distance_km(self, i, j) -> np.ndarray:
        a = self.cell_center_km(i)
        b = self.cell_center_km(j)
        return np.linalg.norm(a - b, axis=-1)

    def slot_of_day(self, slot) -> np.ndarray:
        return np.asarray(slot) % self.slots_per_day

    def day_index(self, slot) -> np.ndarray:
        return np.asarray(slot) // self.slots_per_day

    def day_of_week(self, slot) -> np.ndarray:
        return self.day_index(slot) % 7

    def is_night(self, slot) -> np.ndarray:
        """True for slots inside the night window (home hours)."""
        sod = self.slot_of_day(slot)
        first_day = NIGHT_END_MINUTE // self.slot_minutes
        night_start = NIGHT_START_MINUTE // self.slot_minutes
        return (sod < first_day) | (sod >= night_start)


@dataclass(frozen=True)
class Trajectory:
    """One user's dense (slot, location) sequence over a contiguous slot range."""

    user_id: str
    slots: np.ndarray
    locs: np.ndarray

    def __post_init__(self):
        slots = np.asarray(self.slots, dtype=np.int64)
        locs = np.asarray(self.locs, dtype=np.int64)
        object.__setattr__(self, "slots", slots)
        object.__setattr__(self, "locs", locs)
        if slots.size == 0:
            raise InvalidInputError(f"trajectory of user {self.user_id!r} is empty")
        if slots.shape != locs.shape:
            raise InvalidInputError(
                f"user {self.user_id!r}: slots and locs lengths differ"
            )
        d = np.diff(slots)
        if np.any(d <= 0):
            raise InvalidInputError(
                f"user {self.user_id!r}: slots must be strictly increasing"
            )
        if np.any(d != 1):
            raise InvalidInputError(
                f"user {self.user_id!r}: trajectory has gaps (one point per slot required)"
            )
        if np.any(slots < 0) or np.any(locs < 0):
            raise InvalidInputError(f"user {self.user_id!r}: negative slot or location")

    def __len__(self) -> int:
        return int(self.slots.size)

    @property
    def points(self) -> list[tuple[int, int]]:
        return list(zip(self.slots.tolist(), self.locs.tolist()))

    def validate_against(self, grid: GridSpec) -> None:
        if int(self.locs.max()) >= grid.n_cells:
            raise InvalidInputError(
                f"user {self.user_id!r}: location {int(self.locs.max())} "
                f">= number of cells {grid.n_cells}"
            )
        if int(self.slots.max()) >= grid.n_slots:
            raise InvalidInputError(
                f"user {self.user_id!r}: slot {int(self.slots.max())} "
                f">= number of slots {grid.n_slots}"
            )


@dataclass(frozen=True)
class DisasterField:
    """Per-location, per-slot exogenous disaster intensity."""

    intensity: np.ndarray  # (L, T), non-negative
    onset_slot: int
    disaster_type: str = "generic"
    city: str = ""
    unit: str = ""

    def __post_init__(self):
        arr = np.asarray(self.intensity, dtype=np.float64)
        object.__setattr__(self, "intensity", arr)
        if arr.ndim != 2:
            raise InvalidInputError("intensity must be a 2-D (cells x slots) matrix")
        if np.any(arr < 0):
            raise InvalidInputError("disaster intensity must be non-negative")
        if self.onset_slot < 0 or self.onset_slot > arr.shape[1]:
            raise InvalidInputError("onset_slot outside the slot range")
        if self.onset_slot > 0 and np.any(arr[:, : self.onset_slot] != 0):
            raise InvalidInputError("intensity must be zero before onset_slot")

    @property
    def n_cells(self) -> int:
        return self.intensity.shape[0]

    @property
    def n_slots(self) -> int:
        return self.intensity.shape[1]


@dataclass(frozen=True)
class FlowMatrix:
    """Location x time-slot visit counts (real-valued so that fractional
    physics-predicted flows share the type)."""

    counts: np.ndarray  # (L, T)

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.float64)
        object.__setattr__(self, "counts", arr)
        if arr.ndim != 2:
            raise InvalidInputError("flow matrix must be 2-D (cells x slots)")
        if np.any(arr < 0):
            raise InvalidInputError("flow counts must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    def total(self) -> float:
        return float(self.counts.sum())


@dataclass(frozen=True)
class CityDataset:
    """Everything known about one synthetic city."""

    name: str
    grid: GridSpec
    normal: tuple[Trajectory, ...]
    disaster: tuple[Trajectory, ...]
    field: DisasterField
    train_users: frozenset[str]
    val_users: frozenset[str]
    test_users: frozenset[str]
    homes: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        users = {t.user_id for t in self.normal}
        splits = (self.train_users, self.val_users, self.test_users)
        if (self.train_users & self.val_users or self.train_users & self.test_users
                or self.val_users & self.test_users):
            raise InvalidInputError(f"city {self.name!r}: splits overlap")
        if set().union(*splits) != users:
            raise InvalidInputError(f"city {self.name!r}: splits do not cover all users")

    def subset(self, trajs: Sequence[Trajectory], users: frozenset[str]) -> tuple[Trajectory, ...]:
        return tuple(t for t in trajs if t.user_id in users)


def aggregate_flow(trajs: Iterable[Trajectory], grid: GridSpec) -> FlowMatrix:
    """Count trajectory points per (location, slot).

    Total mass equals the total number of points across the input set.
    """
    counts = np.zeros((grid.n_cells, grid.n_slots), dtype=np.float64)
    for traj in trajs:
        traj.validate_against(grid)
        np.add.at(counts, (traj.locs, traj.slots), 1.0)
    return FlowMatrix(counts)


def travel_distance(traj: Trajectory, grid: GridSpec) -> float:
    """Total kilometers along the path of consecutive cell centers."""
    traj.validate_against(grid)
    if len(traj) < 2:
        return 0.0
    centers = grid.cell_center_km(traj.locs)
    return float(np.linalg.norm(np.diff(centers, axis=0), axis=1).sum())


def radius_of_gyration(traj: Trajectory, grid: GridSpec) -> float:
    """RMS distance of visited cell centers from their centroid, each point
    weighted once per visit."""
    traj.validate_against(grid)
    centers = grid.cell_center_km(traj.locs)
    centroid = centers.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum((centers - centroid) ** 2, axis=1))))


def stay_durations(traj: Trajectory) -> list[int]:
    """Run lengths of consecutive identical locations; sums to len(traj)."""
    locs = traj.locs
    changes = np.flatnonzero(np.diff(locs) != 0)
    bounds = np.concatenate([[-1], changes, [locs.size - 1]])
    return np.diff(bounds).astype(int).tolist()


def daily_locations(traj: Trajectory, grid: GridSpec) -> list[int]:
    """Distinct locations visited on each day the trajectory overlaps."""
    traj.validate_against(grid)
    days = grid.day_index(traj.slots)
    out = []
    for day in np.unique(days):
        out.append(int(np.unique(traj.locs[days == day]).size))
    return out


def per_day_slices(traj: Trajectory, grid: GridSpec) -> list[Trajectory]:
    """Split a trajectory at day boundaries (used for per-day statistics)."""
    days = grid.day_index(traj.slots)
    slices = []
    for day in np.unique(days):
        m = days == day
        slices.append(Trajectory(traj.user_id, traj.slots[m], traj.locs[m]))
    return slices


def filter_users(
    trajs: Iterable[Trajectory], grid: GridSpec, min_records_per_day: int = 5
) -> list[Trajectory]:
    """Keep users whose every covered day has at least `min_records_per_day`
    points.  Idempotent; threshold 0 is the identity."""
    if min_records_per_day < 0:
        raise InvalidInputError("min_records_per_day must be >= 0")
    kept = []
    for traj in trajs:
        days = grid.day_index(traj.slots)
        _, per_day = np.unique(days, return_counts=True)
        if np.all(per_day >= min_records_per_day):
            kept.append(traj)
    return kept


def infer_home(traj: Trajectory, grid: GridSpec) -> int:
    """Most frequent night-window location; falls back to the overall modal
    location when the trajectory covers no night slots."""
    night = grid.is_night(traj.slots)
    locs = traj.locs[night] if night.any() else traj.locs
    vals, counts = np.unique(locs, return_counts=True)
    return int(vals[np.argmax(counts)])


def aggregate_out_of_home_flow(
    trajs: Iterable[Trajectory], grid: GridSpec, homes: dict[str, int] | None = None
) -> FlowMatrix:
    """Aggregate only points away from each user's home cell.

    Homes default to the night-window inference; pass known homes when the
    generating process provides them.
    """
    counts = np.zeros((grid.n_cells, grid.n_slots), dtype=np.float64)
    for traj in trajs:
        traj.validate_against(grid)
        home = homes[traj.user_id] if homes is not None else infer_home(traj, grid)
        m = traj.locs != home
        np.add.at(counts, (traj.locs[m], traj.slots[m]), 1.0)
    return FlowMatrix(counts)
