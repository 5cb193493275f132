"""
Lagrangian grid-based filter for models with invertible dynamics.

The time update is split into advection, which transports the filtering
PMD through f by pulling the new equidistant grid back through f^-1 and
interpolating, and diffusion, which convolves the advected PMD with the
process-noise density on the new grid via the FFT.

    (i)   filtering moments from the PMD
    (ii)  predictive moments from a local (EKF) prediction
    (iii) new equidistant grid from the predictive moments
    (iv)  back-propagated grid  xi_bp = f^-1(xi_next)
    (v)   filtering weights interpolated at xi_bp
    (vi)  advected weights, volume-corrected by |det J_f(xi_bp)|^-1
    (vii) diffusion by zero-padded FFT convolution with the noise kernel
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import fft

from .common import likelihood, local_predict_moments, measurement_update
from .errors import DegenerateDensityError, SingularJacobianError
from .model import StateSpaceModel, regularized_cov
from .pmd import (Grid, PointMassDensity, design_grid, gaussian_kernel_on_grid,
                  interpolate_weights, normalize, pmd_moments)


@dataclass(frozen=True, eq=False)
class BackPropagatedGrid:
    points: np.ndarray        # (N, n_x), same order as the forward grid
    cell_volumes: np.ndarray  # (N,)


def back_propagate(grid_next: Grid, model: StateSpaceModel) -> BackPropagatedGrid:
    points = model.dynamics_inverse(grid_next.points())
    dets = np.abs(np.linalg.det(model.dynamics_jacobian(points)))
    if np.any(~(dets >= 1e-300)):
        raise SingularJacobianError("singular dynamics Jacobian on the back-propagated grid")
    return BackPropagatedGrid(points, grid_next.cell_volume / dets)


def advect(filt: PointMassDensity, bp: BackPropagatedGrid, grid_next: Grid) -> np.ndarray:
    """Advected predictive weights on ``grid_next`` (normalised)."""
    interp = interpolate_weights(filt, bp.points)
    adv = interp * (bp.cell_volumes / grid_next.cell_volume)
    try:
        return normalize(adv.reshape(grid_next.counts), grid_next.cell_volume)
    except DegenerateDensityError:
        raise DegenerateDensityError(
            "advection lost all mass: back-propagated grid misses the filtering grid") from None


def linear_convolve(values: np.ndarray, kernel: np.ndarray, cell_volume: float) -> np.ndarray:
    """out[n] = sum_m kernel[n - m + c] * values[m] * cell_volume.

    ``kernel`` has the same odd shape as ``values`` with its zero offset at
    the central index c. Both are zero-padded to at least 2N-1 per axis, so
    the result is the linear (not circular) convolution.
    """
    if values.shape != kernel.shape:
        raise ValueError("values and kernel must have the same shape")
    counts = values.shape
    padded = [fft.next_fast_len(2 * c - 1, real=True) for c in counts]
    spec = fft.rfftn(values, padded) * fft.rfftn(kernel, padded)
    full = fft.irfftn(spec, padded)
    window = tuple(slice((c - 1) // 2, (c - 1) // 2 + c) for c in counts)
    return full[window] * cell_volume


def diffuse(adv_weights: np.ndarray, grid_next: Grid, process_noise_cov: np.ndarray) -> np.ndarray:
    """Convolve advected weights with N(0, Q) sampled on the grid offsets."""
    kernel = gaussian_kernel_on_grid(grid_next, regularized_cov(process_noise_cov))
    out = linear_convolve(np.asarray(adv_weights, dtype=float), kernel, grid_next.cell_volume)
    return normalize(out, grid_next.cell_volume)


def lgbf_predict_on_grid(filt: PointMassDensity, grid_next: Grid, model: StateSpaceModel,
                         trace: Optional[dict] = None) -> PointMassDensity:
    """Steps (iv)-(vii) for a given new grid."""
    bp = back_propagate(grid_next, model)
    adv = advect(filt, bp, grid_next)
    pred = diffuse(adv, grid_next, model.process_noise_cov)
    if trace is not None:
        trace.update(grid=grid_next, back_propagated=bp, advected=adv)
    return PointMassDensity(grid_next, pred)


def lgbf_predict(filt: PointMassDensity, model: StateSpaceModel, kappa: float, counts,
                 trace: Optional[dict] = None) -> PointMassDensity:
    """Full Lagrangian time update; ``trace`` (if given) receives intermediates."""
    filt_moments = pmd_moments(filt)
    pred_moments = local_predict_moments(model, filt_moments)
    grid_next = design_grid(pred_moments, kappa, counts)
    if trace is not None:
        trace.update(filt_moments=filt_moments, pred_moments=pred_moments)
    return lgbf_predict_on_grid(filt, grid_next, model, trace)


def lgbf_step(filt: PointMassDensity, z_next, model: StateSpaceModel, kappa: float, counts):
    pred = lgbf_predict(filt, model, kappa, counts)
    return pred, measurement_update(pred, likelihood(model, pred.grid, z_next))
