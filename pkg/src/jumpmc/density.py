"""Computable error densities for the Euler time discretization.

Two a-posteriori densities are provided.  The per-step density uses the
drift/diffusion time-and-space derivatives at the left node and the dual
weights at the right left-limit,

    rho_n = 1/2 [ (da/dt + a'a + a'' : dd) . phi
                + (dd/dt + d'a + d'' : dd + 2 a' dd) : phi'
                + 2 (d' dd) : phi'' ]            with dd = b b^T / 2,

so each step contributes rho_n dt_n^2 to the expected time error.  The
interval density instead differences the coefficients across each step
and aggregates over the steps inside one deterministic interval.  Both
are clamped into [TOL^(1/9), TOL^(-1)] before they steer refinement, so
rare large samples cannot stall or distort the mesh; estimation always
uses the raw signed values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .duals import DualWeights, _stack_calls
from .errors import ParameterError
from .euler import EulerPath
from .model import JumpDiffusionModel

Array = np.ndarray


@dataclass(frozen=True)
class ErrorIndicators:
    """Densities, their widths, and indicators r = density * width^2."""

    density: Array
    widths: Array
    r: Array
    total: float


def _second_moment_stacks(b, b_t, b_x, b_xx):
    """d = b b^T / 2 and its derivatives from stacked diffusion arrays."""
    bT = np.swapaxes(b, -1, -2)
    dd = 0.5 * b @ bT
    d_t = 0.5 * (b_t @ bT + b @ np.swapaxes(b_t, -1, -2))
    cross = np.einsum("...klj,...ml->...kmj", b_x, b)
    d_x = 0.5 * (cross + np.swapaxes(cross, -3, -2))
    t1 = np.einsum("...klij,...ml->...kmij", b_xx, b)
    t2 = np.einsum("...kli,...mlj->...kmij", b_x, b_x)
    d_xx = 0.5 * (t1 + np.swapaxes(t1, -4, -3) + t2 + np.swapaxes(t2, -4, -3))
    return dd, d_t, d_x, d_xx


def _rho_from_stacks(cb: dict, phi: Array, phi1: Array, phi2: Array) -> Array:
    """Per-row density from stacked coefficient calls and dual weights.

    Row-wise arithmetic only, so a row's value never depends on which
    other rows share the stack.
    """
    a = cb["drift"]
    dd, d_t, d_x, d_xx = _second_moment_stacks(
        cb["diffusion"], cb["diffusion_t"], cb["diffusion_x"], cb["diffusion_xx"]
    )
    drift_part = (
        cb["drift_t"]
        + np.einsum("nkj,nj->nk", cb["drift_x"], a)
        + np.einsum("nkij,nij->nk", cb["drift_xx"], dd)
    )
    diff_part = (
        d_t
        + np.einsum("nkmj,nj->nkm", d_x, a)
        + np.einsum("nkmij,nij->nkm", d_xx, dd)
        + 2.0 * np.einsum("nkj,njm->nkm", cb["drift_x"], dd)
    )
    third_part = 2.0 * np.einsum("nkmj,njr->nkmr", d_x, dd)
    return 0.5 * (
        np.einsum("nk,nk->n", drift_part, phi)
        + np.einsum("nkm,nkm->n", diff_part, phi1)
        + np.einsum("nkmr,nkmr->n", third_part, phi2)
    )


def rho_per_step(model: JumpDiffusionModel, path: EulerPath, duals: DualWeights) -> Array:
    """Signed per-step error density, one value per augmented step.

    Requires third order dual weights and first time derivatives of drift
    and diffusion.
    """
    if duals.order < 3:
        raise ParameterError(
            f"per-step density needs order 3 dual weights, got order {duals.order}"
        )
    grid = path.grid
    if duals.phi_left.shape[0] != grid.n_steps + 1:
        raise ParameterError("dual weights do not match the path's grid")
    model.require(
        "drift_t", "drift_x", "drift_xx", "diffusion_t", "diffusion_x", "diffusion_xx"
    )
    cb = _stack_calls(
        model,
        [
            "drift",
            "drift_t",
            "drift_x",
            "drift_xx",
            "diffusion",
            "diffusion_t",
            "diffusion_x",
            "diffusion_xx",
        ],
        grid.times[:-1],
        path.values[:-1],
    )
    return _rho_from_stacks(cb, duals.phi_left[1:], duals.phi1_left[1:], duals.phi2_left[1:])


def rho_per_interval(
    model: JumpDiffusionModel, path: EulerPath, duals: DualWeights
) -> Array:
    """Signed coefficient-difference density per deterministic interval.

    Differences drift and d = b b^T / 2 across each augmented step,
    weights them with the first and second order duals, and scales the
    interval sum by dt_n / (interval width)^2.
    """
    if duals.order < 2:
        raise ParameterError(
            f"interval density needs order 2 dual weights, got order {duals.order}"
        )
    grid = path.grid
    if duals.phi_left.shape[0] != grid.n_steps + 1:
        raise ParameterError("dual weights do not match the path's grid")
    lo = _stack_calls(model, ["drift", "diffusion"], grid.times[:-1], path.values[:-1])
    hi = _stack_calls(model, ["drift", "diffusion"], grid.times[1:], path.left_values[1:])

    def dd_of(b):
        return 0.5 * b @ np.swapaxes(b, -1, -2)

    da = hi["drift"] - lo["drift"]
    ddd = dd_of(hi["diffusion"]) - dd_of(lo["diffusion"])
    step_sum = np.einsum("nk,nk->n", da, duals.phi_left[1:]) + np.einsum(
        "nkm,nkm->n", ddd, duals.phi1_left[1:]
    )

    widths = np.diff(grid.det_times)
    acc = np.zeros(grid.n_det)
    np.add.at(acc, grid.interval_of_step, step_sum * grid.dt)
    return 0.5 * acc / widths ** 2


def _check_tol(tol: float) -> None:
    if not 0.0 < tol < 1.0:
        raise ParameterError(f"TOL must lie in (0, 1), got {tol}")


def cutoff_density_S(rho: Array, tol: float) -> Array:
    """Per-step refinement density: |rho| clamped into [TOL^(1/9), 1/TOL]."""
    _check_tol(tol)
    lo = tol ** (1.0 / 9.0)
    hi = 1.0 / tol
    return np.minimum(np.maximum(np.abs(rho), lo), hi)


def interval_step_sums(rho_steps: Array, grid) -> Array:
    """Signed sums of dt^2-weighted per-step density over each interval."""
    acc = np.zeros(grid.n_det)
    np.add.at(acc, grid.interval_of_step, np.asarray(rho_steps, float) * grid.dt ** 2)
    return acc


def cutoff_density_D(rho_steps: Array, grid, tol: float) -> Array:
    """Per-interval refinement density from the per-step one.

    The per-step contributions dt^2 rho are summed over each deterministic
    interval, normalized by the squared interval width, and clamped like
    the per-step density.
    """
    widths = np.diff(grid.det_times)
    return cutoff_density_S(interval_step_sums(rho_steps, grid) / widths ** 2, tol)


def error_indicators(density: Array, widths: Array) -> ErrorIndicators:
    """Per-piece indicators r = density * width^2 and their total."""
    density = np.asarray(density, float)
    widths = np.asarray(widths, float)
    if density.shape != widths.shape:
        raise ParameterError(
            f"density and widths must align, got {density.shape} vs {widths.shape}"
        )
    r = density * widths ** 2
    return ErrorIndicators(density=density, widths=widths, r=r, total=float(np.sum(r)))
