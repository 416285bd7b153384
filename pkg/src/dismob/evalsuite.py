"""The six evaluation metrics: four Jensen-Shannon divergences over behavioral
statistics (travel distance, radius of gyration, stay duration, daily distinct
locations) and two MAPE comparisons of disaster-decay structure (decay rate at
the peak-intensity slot, fitted temporal decay exponent).

Histogram edges always come from the real set's 1st-99th percentiles so
generated-set pathologies cannot reshape the comparison space; divergences are
in nats and bounded by ln 2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (DisasterField, GridSpec, Trajectory, aggregate_out_of_home_flow,
                   daily_locations, per_day_slices, radius_of_gyration,
                   stay_durations, travel_distance)
from .errors import InsufficientDataError, InvalidInputError
from .physics import FitOptions, FlowMatrix, fit_decay

LN2 = float(np.log(2.0))
SMOOTHING = 1e-9


@dataclass(frozen=True)
class Distribution:
    """Normalized histogram over fixed bin edges."""

    bin_edges: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        if len(self.mass) != len(self.bin_edges) - 1:
            raise InvalidInputError("mass length must be len(bin_edges) - 1")
        if abs(float(self.mass.sum()) - 1.0) > 1e-9:
            raise InvalidInputError("distribution mass must sum to 1")
        if np.any(self.mass < 0):
            raise InvalidInputError("distribution mass must be non-negative")


@dataclass(frozen=True)
class MetricReport:
    jsd_distance: float
    jsd_radius: float
    jsd_duration: float
    jsd_dailyloc: float
    mape_decay_rate: float
    mape_decay_speed: float

    def __post_init__(self):
        for name in ("jsd_distance", "jsd_radius", "jsd_duration", "jsd_dailyloc"):
            v = getattr(self, name)
            if not (-1e-12 <= v <= LN2 + 1e-9):
                raise InvalidInputError(f"{name} = {v} outside [0, ln 2]")
        for name in ("mape_decay_rate", "mape_decay_speed"):
            if not np.isfinite(getattr(self, name)):
                raise InvalidInputError(f"{name} must be finite")

    def as_dict(self) -> dict:
        return {
            "jsd_distance": self.jsd_distance,
            "jsd_radius": self.jsd_radius,
            "jsd_duration": self.jsd_duration,
            "jsd_dailyloc": self.jsd_dailyloc,
            "mape_decay_rate": self.mape_decay_rate,
            "mape_decay_speed": self.mape_decay_speed,
        }


def histogram(values: Sequence[float], edges: np.ndarray) -> Distribution:
    """Normalized counts with additive smoothing; out-of-range values clamp
    into the end bins."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise InsufficientDataError("histogram needs at least one value")
    edges = np.asarray(edges, dtype=np.float64)
    lo, hi = edges[0], edges[-1]
    clamped = np.clip(values, lo, hi)
    counts, _ = np.histogram(clamped, bins=edges)
    mass = counts.astype(np.float64) + SMOOTHING
    return Distribution(edges, mass / mass.sum())


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def jsd(a: Distribution, b: Distribution) -> float:
    """Jensen-Shannon divergence in nats; symmetric, in [0, ln 2]."""
    if a.bin_edges.shape != b.bin_edges.shape or np.any(a.bin_edges != b.bin_edges):
        raise InvalidInputError("distributions must share bin edges")
    m = 0.5 * (a.mass + b.mass)
    return 0.5 * _kl(a.mass, m) + 0.5 * _kl(b.mass, m)


def mape(pred: Sequence[float], truth: Sequence[float]) -> tuple[float, int]:
    """100 * mean(|pred - truth| / |truth|); zero-truth entries are excluded
    and counted.  Returns (percentage, n_excluded)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.size == 0:
        raise InvalidInputError("pred and truth must be equal-length, non-empty")
    keep = truth != 0
    excluded = int((~keep).sum())
    if not keep.any():
        raise InsufficientDataError("all truth entries are zero")
    value = 100.0 * float(np.mean(np.abs(pred[keep] - truth[keep]) / np.abs(truth[keep])))
    return value, excluded


def _shared_edges(real_values: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = np.percentile(real_values, [1.0, 99.0])
    if hi - lo < 1e-12:
        pad = max(abs(lo) * 1e-3, 0.5)
        lo, hi = lo - pad, hi + pad
    return np.linspace(lo, hi, bins + 1)


def trajectory_statistics(trajs: Sequence[Trajectory], grid: GridSpec) -> dict[str, np.ndarray]:
    """Pooled per-trajectory behavioral statistics.

    Distance is computed per covered day; radius per trajectory; durations and
    daily location counts pooled over all runs / days.
    """
    distances, radii, durations, dailyloc = [], [], [], []
    for traj in trajs:
        for piece in per_day_slices(traj, grid):
            distances.append(travel_distance(piece, grid))
        radii.append(radius_of_gyration(traj, grid))
        durations.extend(stay_durations(traj))
        dailyloc.extend(daily_locations(traj, grid))
    return {
        "distance": np.asarray(distances, dtype=np.float64),
        "radius": np.asarray(radii, dtype=np.float64),
        "duration": np.asarray(durations, dtype=np.float64),
        "dailyloc": np.asarray(dailyloc, dtype=np.float64),
    }


def behavior_report(
    real: Sequence[Trajectory],
    gen: Sequence[Trajectory],
    grid: GridSpec,
    bins: int = 30,
) -> dict[str, float]:
    """The four behavioral JSDs with shared edges fixed from the real set."""
    if not real or not gen:
        raise InsufficientDataError("behavior_report needs non-empty sets")
    real_stats = trajectory_statistics(real, grid)
    gen_stats = trajectory_statistics(gen, grid)
    out = {}
    for key in ("distance", "radius", "duration", "dailyloc"):
        edges = _shared_edges(real_stats[key], bins)
        out[f"jsd_{key}"] = jsd(
            histogram(real_stats[key], edges), histogram(gen_stats[key], edges)
        )
    return out


def peak_intensity_slot(field: DisasterField) -> int:
    """First slot of maximal total intensity."""
    totals = field.intensity.sum(axis=0)
    return int(np.argmax(totals))


def top_intensity_cells(field: DisasterField, slot: int, decile: float = 0.9) -> np.ndarray:
    """Cells whose intensity at `slot` reaches the given quantile."""
    col = field.intensity[:, slot]
    threshold = np.quantile(col, decile)
    return np.flatnonzero(col >= threshold)


def decay_rate(
    flow_out: FlowMatrix, normal_out: FlowMatrix, field: DisasterField
) -> float:
    """1 - (out-of-home flow / normal out-of-home flow) at the peak-intensity
    slot, restricted to the top-decile intensity cells."""
    t_star = peak_intensity_slot(field)
    cells = top_intensity_cells(field, t_star)
    denom = float(normal_out.counts[cells, t_star].sum())
    if denom <= 0:
        raise InsufficientDataError("no normal out-of-home flow at the peak slot")
    return 1.0 - float(flow_out.counts[cells, t_star].sum()) / denom


def decay_metrics(
    gen: Sequence[Trajectory],
    real_disaster: Sequence[Trajectory],
    normal: Sequence[Trajectory],
    field: DisasterField,
    grid: GridSpec,
    fit_opts: FitOptions = FitOptions(),
    homes: dict[str, int] | None = None,
) -> tuple[float, float]:
    """(decay-rate MAPE, decay-speed MAPE) of the generated set against the
    real disaster set, both measured on out-of-home flows against the same
    normal baseline.  Homes are taken from `homes` when known, otherwise
    inferred from night-window occupancy.
    """
    gen, real_disaster, normal = list(gen), list(real_disaster), list(normal)
    normal_out = aggregate_out_of_home_flow(normal, grid, homes)
    real_out = aggregate_out_of_home_flow(real_disaster, grid, homes)
    gen_out = aggregate_out_of_home_flow(gen, grid, None)
    # Rescale to the normal set's population so the three flows are comparable
    # (generated sets are usually smaller than the real ones).
    real_out = FlowMatrix(real_out.counts * (len(normal) / max(len(real_disaster), 1)))
    gen_out = FlowMatrix(gen_out.counts * (len(normal) / max(len(gen), 1)))

    rate_real = decay_rate(real_out, normal_out, field)
    rate_gen = decay_rate(gen_out, normal_out, field)
    if rate_real == 0.0:
        raise InsufficientDataError("real decay rate is zero; MAPE undefined")
    mape_rate = 100.0 * abs(rate_gen - rate_real) / abs(rate_real)

    try:
        real_params, _ = fit_decay(normal_out, real_out, field, grid, fit_opts)
        gen_params, _ = fit_decay(normal_out, gen_out, field, grid, fit_opts)
    except InsufficientDataError as exc:
        raise InsufficientDataError(f"decay-speed fit failed: {exc}") from exc
    if real_params.alpha_decay == 0.0:
        raise InsufficientDataError("real decay speed is zero; MAPE undefined")
    mape_speed = (
        100.0 * abs(gen_params.alpha_decay - real_params.alpha_decay)
        / real_params.alpha_decay
    )
    return mape_rate, mape_speed
