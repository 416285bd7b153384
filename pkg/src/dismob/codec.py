"""Trajectory encoder/decoder.

Locations are embedded deterministically with the first non-trivial
eigenvectors of the symmetric-normalized Laplacian of a proximity graph over
cell centers (unit-norm rows, fixed sign convention), so decoding by cosine
similarity inverts encoding exactly.  Day-of-week and slot-of-day tables are
the trainable temporal half of the representation; a trajectory embeds as the
row-wise concatenation [D[loc]; P[dow]; Z[slot-of-day]].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GridSpec, Trajectory
from .errors import ConfigError, InvalidInputError, NumericError

DAYS_PER_WEEK = 7


@dataclass(frozen=True)
class TemporalTables:
    """Day-of-week table P (7 x w) and slot-of-day table Z (T_h x W)."""

    P: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        if self.P.shape[0] != DAYS_PER_WEEK:
            raise InvalidInputError("P must have exactly 7 rows")
        if not (np.all(np.isfinite(self.P)) and np.all(np.isfinite(self.Z))):
            raise InvalidInputError("temporal tables must be finite")

    @property
    def slots_per_day(self) -> int:
        return self.Z.shape[0]


@dataclass(frozen=True)
class SpatialGraph:
    """Proximity graph over grid cells; edge weights are center distances."""

    n_nodes: int
    edges: np.ndarray   # (E, 2) with u < v
    weights: np.ndarray  # (E,) kilometers, > 0
    radius_km: float
    edgeless: bool      # warning flag: radius too small for any edge

    def __post_init__(self):
        if self.edges.size and np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise InvalidInputError("spatial graph must not contain self-loops")
        if np.any(self.weights <= 0):
            raise InvalidInputError("spatial graph weights must be positive")


@dataclass(frozen=True)
class LocationEmbedding:
    """Unit-norm spectral embedding rows, one per grid cell."""

    D: np.ndarray  # (L, W)

    def __post_init__(self):
        norms = np.linalg.norm(self.D, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise InvalidInputError("location embedding rows must be unit norm")

    @property
    def width(self) -> int:
        return self.D.shape[1]


@dataclass(frozen=True)
class TrajEmbedding:
    """Per-point embedding rows [spatial; day-of-week; slot-of-day]."""

    e: np.ndarray
    spatial_width: int
    slots: np.ndarray

    @property
    def spatial(self) -> np.ndarray:
        return self.e[:, : self.spatial_width]

    @property
    def temporal(self) -> np.ndarray:
        return self.e[:, self.spatial_width:]


def build_spatial_graph(grid: GridSpec, radius_km: float) -> SpatialGraph:
    """Connect every pair of cells with 0 < distance <= radius_km."""
    if radius_km <= 0:
        raise InvalidInputError("radius_km must be > 0")
    n = grid.n_cells
    centers = grid.cell_center_km(np.arange(n))
    d = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
    iu, iv = np.triu_indices(n, k=1)
    keep = d[iu, iv] <= radius_km
    edges = np.stack([iu[keep], iv[keep]], axis=1)
    weights = d[iu, iv][keep]
    return SpatialGraph(n, edges, weights, radius_km, edgeless=edges.size == 0)


def embed_locations(graph: SpatialGraph, width: int) -> LocationEmbedding:
    """First `width` non-trivial eigenvectors of the symmetric-normalized
    Laplacian with Gaussian edge affinities, rows normalized to unit length.

    Deterministic: eigenvectors are taken in ascending eigenvalue order with
    the first nonzero coordinate of each made positive.
    """
    n = graph.n_nodes
    if n < 1:
        raise InvalidInputError("graph must have at least one node")
    if width >= n:
        raise ConfigError(
            f"embedding width {width} needs at least {width + 1} cells "
            f"(grid has {n}); not enough non-trivial eigenvectors"
        )
    affinity = np.zeros((n, n))
    if graph.edges.size:
        a = np.exp(-graph.weights**2 / (2.0 * graph.radius_km**2))
        affinity[graph.edges[:, 0], graph.edges[:, 1]] = a
        affinity[graph.edges[:, 1], graph.edges[:, 0]] = a
    deg = affinity.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0))
    lap = np.eye(n) - inv_sqrt[:, None] * affinity * inv_sqrt[None, :]
    eigvals, eigvecs = np.linalg.eigh(lap)
    vecs = eigvecs[:, 1 : width + 1]
    for j in range(vecs.shape[1]):
        col = vecs[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-10)
        if nz.size and col[nz[0]] < 0:
            vecs[:, j] = -col
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    if np.any(norms < 1e-9):
        raise NumericError(
            "degenerate spectral embedding row; increase width or graph radius"
        )
    return LocationEmbedding(vecs / norms)


def encode(traj: Trajectory, tables: TemporalTables, emb: LocationEmbedding) -> TrajEmbedding:
    """Row i = [D[loc_i]; P[day-of-week_i]; Z[slot-of-day_i]]."""
    if int(traj.locs.max()) >= emb.D.shape[0]:
        raise InvalidInputError(
            f"user {traj.user_id!r}: location outside the embedding table"
        )
    t_h = tables.slots_per_day
    sod = traj.slots % t_h
    dow = (traj.slots // t_h) % DAYS_PER_WEEK
    rows = np.concatenate([emb.D[traj.locs], tables.P[dow], tables.Z[sod]], axis=1)
    return TrajEmbedding(rows, spatial_width=emb.width, slots=traj.slots.copy())


@dataclass(frozen=True)
class DecodeResult:
    locations: np.ndarray
    degenerate: np.ndarray  # True where the spatial segment had zero norm


def decode_spatial(segment: np.ndarray, emb: LocationEmbedding) -> DecodeResult:
    """Argmax cosine similarity against the embedding rows; ties and zero-norm
    rows resolve to the lowest location index (the latter flagged)."""
    norms = np.linalg.norm(segment, axis=1, keepdims=True)
    degenerate = norms[:, 0] < 1e-12
    safe = np.where(degenerate[:, None], 1.0, norms)
    sims = (segment / safe) @ emb.D.T
    sims[degenerate] = 0.0
    return DecodeResult(np.argmax(sims, axis=1).astype(np.int64), degenerate)


def decode(E: TrajEmbedding, emb: LocationEmbedding) -> DecodeResult:
    if E.spatial_width != emb.width:
        raise InvalidInputError(
            f"embedding spatial width {E.spatial_width} != table width {emb.width}"
        )
    return decode_spatial(E.spatial, emb)
