"""Eulerian grid-based filter: direct O(N^2) Chapman-Kolmogorov prediction."""

from __future__ import annotations

import math

import numpy as np

from .common import likelihood, local_predict_moments, measurement_update
from .errors import DegenerateDensityError
from .model import StateSpaceModel, regularized_cov
from .pmd import Grid, PointMassDensity, design_grid, normalize, pmd_moments

# pair evaluations per block of the (new point, old point) double loop
_BLOCK_ELEMENTS = 1 << 21


def egbf_predict(filt: PointMassDensity, new_grid: Grid, model: StateSpaceModel) -> PointMassDensity:
    """P(xi_j) = sum_i p_w(xi_j - f(xi_i)) P(xi_i) delta, for every new point j."""
    q = regularized_cov(model.process_noise_cov)
    try:
        chol = np.linalg.cholesky(q)
    except np.linalg.LinAlgError:
        raise ValueError("process noise covariance is singular after regularisation") from None
    whiten = np.linalg.inv(chol)
    n = model.state_dim
    log_norm = 0.5 * n * math.log(2.0 * math.pi) + float(np.log(np.diag(chol)).sum())

    new_w = new_grid.points() @ whiten.T
    img_w = model.dynamics(filt.grid.points()) @ whiten.T
    mass = filt.weights.ravel() * filt.grid.cell_volume

    n_old = img_w.shape[0]
    rows = max(1, _BLOCK_ELEMENTS // n_old)
    pred = np.empty(new_w.shape[0])
    for start in range(0, new_w.shape[0], rows):
        block = new_w[start:start + rows]
        quad = np.zeros((block.shape[0], n_old))
        for d in range(n):
            diff = block[:, d, None] - img_w[None, :, d]
            quad += diff * diff
        pred[start:start + rows] = np.exp(-0.5 * quad - log_norm) @ mass
    try:
        w = normalize(pred.reshape(new_grid.counts), new_grid.cell_volume)
    except DegenerateDensityError:
        raise DegenerateDensityError("EGbF prediction lost all mass (new grid misses the transition support)") from None
    return PointMassDensity(new_grid, w)


def egbf_step(filt: PointMassDensity, z_next, model: StateSpaceModel, kappa: float, counts):
    """Predict onto a moment-designed grid, then absorb ``z_next``."""
    new_grid = design_grid(local_predict_moments(model, pmd_moments(filt)), kappa, counts)
    pred = egbf_predict(filt, new_grid, model)
    return pred, measurement_update(pred, likelihood(model, new_grid, z_next))
