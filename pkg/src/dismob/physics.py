"""Spatiotemporal decay model of disaster-perturbed mobility.

The retained-mobility ratio at cell i and slot t is

    H(i, t) = 1 / (1 + k(t) * sum_j w_ij * N_j(t)),      k(t) = k0 * exp(-alpha * t)

with t measured in slots since disaster onset, N the intensity field and
w_ij = exp(-d_ij / rho) an exponential distance kernel.  The module fits
(k0, alpha, rho) to observed flow ratios, predicts disaster flows from
normal flows, and provides the flow-alignment loss used during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .core import DisasterField, FlowMatrix, GridSpec
from .errors import InsufficientDataError, InvalidInputError


@dataclass(frozen=True)
class DecayParams:
    """Fitted or generating parameters of the decay law."""

    k0: float
    alpha_decay: float  # per slot
    rho_km: float

    def __post_init__(self):
        if self.k0 < 0:
            raise InvalidInputError("k0 must be >= 0")
        if self.alpha_decay < 0:
            raise InvalidInputError("alpha_decay must be >= 0")
        if self.rho_km <= 0:
            raise InvalidInputError("rho_km must be > 0")


@dataclass(frozen=True)
class SpatialKernel:
    """Dense symmetric distance kernel with unit diagonal."""

    weights: np.ndarray  # (L, L)
    rho_km: float


def spatial_weight(i: int, j: int, rho_km: float, grid: GridSpec) -> float:
    """w_ij = exp(-d(i, j) / rho), in (0, 1], symmetric, w_ii = 1."""
    if rho_km <= 0:
        raise InvalidInputError("rho_km must be > 0")
    d = float(grid.cell_distance_km(i, j))
    return float(np.exp(-d / rho_km))


def build_kernel(grid: GridSpec, rho_km: float) -> SpatialKernel:
    if rho_km <= 0:
        raise InvalidInputError("rho_km must be > 0")
    idx = np.arange(grid.n_cells)
    centers = grid.cell_center_km(idx)
    d = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
    return SpatialKernel(np.exp(-d / rho_km), rho_km)


def k_of_t(params: DecayParams, t_since_onset: float) -> float:
    """Temporal decay k0 * exp(-alpha * t); monotonically non-increasing."""
    if t_since_onset < 0:
        raise InvalidInputError("t_since_onset must be >= 0")
    return float(params.k0 * np.exp(-params.alpha_decay * t_since_onset))


def weighted_intensity(kernel: SpatialKernel, field: DisasterField) -> np.ndarray:
    """S[i, t] = sum_j w_ij * N_j(t), shape (L, T)."""
    if kernel.weights.shape[0] != field.n_cells:
        raise InvalidInputError("kernel and field disagree on the number of cells")
    return kernel.weights @ field.intensity


def decay_ratio_matrix(
    params: DecayParams, kernel: SpatialKernel, field: DisasterField
) -> np.ndarray:
    """H over the whole grid and slot range, shape (L, T); in (0, 1]."""
    s = weighted_intensity(kernel, field)
    tau = np.clip(np.arange(field.n_slots) - field.onset_slot, 0, None)
    k = params.k0 * np.exp(-params.alpha_decay * tau)
    return 1.0 / (1.0 + k[None, :] * s)


def decay_ratio(
    params: DecayParams, kernel: SpatialKernel, field: DisasterField, i: int, t: int
) -> float:
    """Retained-mobility ratio H(i, t); exactly 1 when the weighted intensity
    at (i, t) is zero."""
    s = float(kernel.weights[i] @ field.intensity[:, t])
    if s == 0.0:
        return 1.0
    tau = max(t - field.onset_slot, 0)
    return float(1.0 / (1.0 + k_of_t(params, tau) * s))


def predict_disaster_flow(
    F_normal: FlowMatrix,
    params: DecayParams,
    kernel: SpatialKernel,
    field: DisasterField,
) -> FlowMatrix:
    """Elementwise H(i, t) * F_normal[i, t]; never exceeds F_normal."""
    if F_normal.shape != field.intensity.shape:
        raise InvalidInputError(
            f"flow shape {F_normal.shape} does not match field shape {field.intensity.shape}"
        )
    H = decay_ratio_matrix(params, kernel, field)
    return FlowMatrix(H * F_normal.counts)


def physics_loss(F_gen: FlowMatrix, F_dis: FlowMatrix) -> float:
    """Mean squared elementwise difference between the two flows."""
    if F_gen.shape != F_dis.shape:
        raise InvalidInputError(
            f"flow shapes differ: {F_gen.shape} vs {F_dis.shape}"
        )
    return float(np.mean((F_gen.counts - F_dis.counts) ** 2))


@dataclass(frozen=True)
class FitOptions:
    min_support: float = 5.0
    max_iters: int = 200
    tol: float = 1e-10
    k0_grid: tuple[float, ...] = dc_field(default=())
    alpha_grid: tuple[float, ...] = dc_field(default=())
    rho_grid_km: tuple[float, ...] = dc_field(default=())

    def resolved_grids(self, cell_km: float):
        k0 = self.k0_grid or (0.0,) + tuple(np.logspace(-2, 1, 13))
        alpha = self.alpha_grid or (0.0,) + tuple(np.logspace(-3, 0.5, 12))
        rho = self.rho_grid_km or tuple(cell_km * f for f in (0.5, 1.0, 2.0, 4.0, 8.0))
        return k0, alpha, rho


@dataclass(frozen=True)
class FitReport:
    rmse: float
    iterations: int
    converged: bool
    n_support: int
    sse: float
    grid_params: DecayParams

    def as_record(self, params: DecayParams) -> dict:
        return {
            "k0": params.k0,
            "alpha_decay": params.alpha_decay,
            "rho_km": params.rho_km,
            "rmse": self.rmse,
            "converged": self.converged,
        }


def _ratio_residual(ratio, s, tau, k0, alpha):
    u = np.exp(-alpha * tau) * s
    H = 1.0 / (1.0 + k0 * u)
    return ratio - H, u, H


def fit_decay(
    F_normal: FlowMatrix,
    F_observed: FlowMatrix,
    field: DisasterField,
    grid: GridSpec,
    opts: FitOptions = FitOptions(),
) -> tuple[DecayParams, FitReport]:
    """Fit (k0, alpha, rho) so that H matches the observed/normal flow ratio.

    Coarse log-grid search over all three parameters, then Gauss-Newton
    refinement of (k0, alpha) with rho held at the grid optimum.  The
    objective depends only on the flow ratio, so rescaling both inputs by a
    common factor leaves the fit unchanged.  Cells and slots with
    F_normal < min_support are excluded to avoid ratio blowup.
    """
    if F_normal.shape != F_observed.shape:
        raise InvalidInputError("normal and observed flows must share a shape")
    if F_normal.shape != field.intensity.shape:
        raise InvalidInputError("flows and field must share a shape")

    support = F_normal.counts >= opts.min_support
    n_support = int(support.sum())
    if n_support == 0:
        raise InsufficientDataError(
            f"no cells with normal flow >= {opts.min_support}; cannot fit"
        )
    ratio = F_observed.counts[support] / F_normal.counts[support]
    tau_all = np.clip(np.arange(field.n_slots) - field.onset_slot, 0, None).astype(float)
    tau = np.broadcast_to(tau_all, F_normal.shape)[support]

    k0_grid, alpha_grid, rho_grid = opts.resolved_grids(grid.cell_km)

    # For each candidate rho: lattice search over (k0, alpha), then
    # Gauss-Newton refinement of (k0, alpha) at that rho.  The winning rho is
    # the one with the lowest refined SSE, so a coarse (k0, alpha) lattice
    # cannot misrank the kernel scale.
    best = None
    for rho in rho_grid:
        s = weighted_intensity(build_kernel(grid, rho), field)[support]
        grid_best = None
        for k0 in k0_grid:
            for alpha in alpha_grid:
                r, _, _ = _ratio_residual(ratio, s, tau, k0, alpha)
                sse = float(r @ r)
                if grid_best is None or sse < grid_best[0] - 1e-15:
                    grid_best = (sse, k0, alpha)
        sse, k0, alpha = grid_best
        grid_start = DecayParams(k0, alpha, rho)
        k0, alpha, sse, iters, converged = _gauss_newton(
            ratio, s, tau, k0, alpha, sse, opts
        )
        if best is None or sse < best[0] - 1e-15:
            best = (sse, k0, alpha, rho, iters, converged, grid_start)

    sse, k0, alpha, rho, iterations, converged, grid_start = best
    params = DecayParams(k0, alpha, rho)
    report = FitReport(
        rmse=float(np.sqrt(sse / n_support)),
        iterations=iterations,
        converged=converged,
        n_support=n_support,
        sse=sse,
        grid_params=grid_start,
    )
    return params, report


def _gauss_newton(ratio, s, tau, k0, alpha, sse, opts: FitOptions):
    """Damped Gauss-Newton on (k0, alpha); lstsq handles the singular
    Jacobian that appears when k0 hits zero (alpha then stays put)."""
    iterations = 0
    converged = False
    for iterations in range(1, opts.max_iters + 1):
        r, u, H = _ratio_residual(ratio, s, tau, k0, alpha)
        J = np.stack([u * H * H, -k0 * tau * u * H * H], axis=1)
        delta, *_ = np.linalg.lstsq(J, -r, rcond=None)
        step = 1.0
        improved = False
        for _ in range(30):
            k0_new = max(k0 + step * delta[0], 0.0)
            alpha_new = max(alpha + step * delta[1], 0.0)
            r_new, _, _ = _ratio_residual(ratio, s, tau, k0_new, alpha_new)
            sse_new = float(r_new @ r_new)
            if sse_new <= sse:
                improved = True
                break
            step *= 0.5
        if not improved:
            converged = True
            break
        moved = max(abs(k0_new - k0), abs(alpha_new - alpha))
        gained = sse - sse_new
        k0, alpha, sse = k0_new, alpha_new, sse_new
        if moved < opts.tol or gained < opts.tol * max(sse, 1.0):
            converged = True
            break
    return k0, alpha, sse, iterations, converged
