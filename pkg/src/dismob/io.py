"""Line-oriented file formats for trajectories and disaster fields.

Trajectory file: UTF-8 CSV with header ``user_id,slot,loc``, rows sorted by
(user_id, slot).  Disaster field file: header ``loc,slot,intensity`` with
zero entries omitted.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import DisasterField, GridSpec, Trajectory
from .errors import InvalidInputError, MissingArtifactError

TRAJ_HEADER = ["user_id", "slot", "loc"]
FIELD_HEADER = ["loc", "slot", "intensity"]


def write_trajectories(path: str | Path, trajs: Sequence[Trajectory]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJ_HEADER)
        for traj in sorted(trajs, key=lambda t: t.user_id):
            for slot, loc in zip(traj.slots.tolist(), traj.locs.tolist()):
                writer.writerow([traj.user_id, slot, loc])


def read_trajectories(path: str | Path) -> list[Trajectory]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"trajectory file not found: {path}")
    by_user: dict[str, list[tuple[int, int]]] = {}
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRAJ_HEADER:
            raise InvalidInputError(
                f"{path}: expected header {','.join(TRAJ_HEADER)!r}, got {header!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                user, slot, loc = row[0], int(row[1]), int(row[2])
            except (IndexError, ValueError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: malformed row {row!r}") from exc
            by_user.setdefault(user, []).append((slot, loc))
    trajs = []
    for user in sorted(by_user):
        pts = by_user[user]
        slots = np.array([p[0] for p in pts], dtype=np.int64)
        locs = np.array([p[1] for p in pts], dtype=np.int64)
        trajs.append(Trajectory(user, slots, locs))
    return trajs


def write_field(path: str | Path, field: DisasterField) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(FIELD_HEADER)
        locs, slots = np.nonzero(field.intensity)
        for loc, slot in zip(locs.tolist(), slots.tolist()):
            writer.writerow([loc, slot, repr(float(field.intensity[loc, slot]))])


def read_field(
    path: str | Path,
    grid: GridSpec,
    onset_slot: int | None = None,
    disaster_type: str = "generic",
    city: str = "",
    unit: str = "",
) -> DisasterField:
    """Load a field file; omitted rows mean zero intensity.

    When `onset_slot` is not given it is inferred as the first slot with any
    nonzero intensity (0 for an all-zero field).
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"field file not found: {path}")
    intensity = np.zeros((grid.n_cells, grid.n_slots), dtype=np.float64)
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != FIELD_HEADER:
            raise InvalidInputError(
                f"{path}: expected header {','.join(FIELD_HEADER)!r}, got {header!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                loc, slot, value = int(row[0]), int(row[1]), float(row[2])
            except (IndexError, ValueError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: malformed row {row!r}") from exc
            if loc >= grid.n_cells or slot >= grid.n_slots:
                raise InvalidInputError(f"{path}:{lineno}: loc/slot outside the grid")
            intensity[loc, slot] = value
    if onset_slot is None:
        nz = np.nonzero(intensity.any(axis=0))[0]
        onset_slot = int(nz[0]) if nz.size else 0
    return DisasterField(intensity, onset_slot, disaster_type, city, unit)
