"""Pieces shared by the grid filters (and, for the likelihood, the PF)."""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateDensityError
from .model import StateSpaceModel
from .pmd import GaussianMoments, Grid, PointMassDensity, normalize


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


def measurement_residuals(model: StateSpaceModel, points: np.ndarray, z) -> np.ndarray:
    r = np.asarray(z, dtype=float) - model.measurement(points)
    mask = model.angular_meas_mask
    if mask.any():
        r = r.copy()
        r[..., mask] = wrap_angle(r[..., mask])
    return r


def log_likelihood(model: StateSpaceModel, points: np.ndarray, z) -> np.ndarray:
    """log N(z - h(x); 0, R) for each row of ``points``."""
    points = np.asarray(points, dtype=float).reshape(-1, model.state_dim)
    r = measurement_residuals(model, points, z)
    chol = np.linalg.cholesky(model.meas_noise_cov)
    # non-finite residuals (escaped states) must come out as zero likelihood
    y = solve_triangular(chol, r.T, lower=True, check_finite=False)
    quad = np.einsum("ij,ij->j", y, y)
    quad = np.where(np.isnan(quad), np.inf, quad)
    log_norm = 0.5 * model.meas_dim * math.log(2.0 * math.pi) + float(np.log(np.diag(chol)).sum())
    return -0.5 * quad - log_norm


def likelihood(model: StateSpaceModel, grid: Grid, z) -> np.ndarray:
    """p(z | x = xi) at every lattice point, shaped like ``grid.counts``."""
    return np.exp(log_likelihood(model, grid.points(), z)).reshape(grid.counts)


def measurement_update(prior: PointMassDensity, field: np.ndarray) -> PointMassDensity:
    """Bayes' rule on the lattice: elementwise product, then renormalise."""
    field = np.asarray(field, dtype=float)
    if field.shape != prior.weights.shape:
        raise ValueError(f"likelihood field shape {field.shape} does not match grid {prior.weights.shape}")
    try:
        w = normalize(prior.weights * field, prior.grid.cell_volume)
    except DegenerateDensityError:
        raise DegenerateDensityError("measurement incompatible with prior support") from None
    return PointMassDensity(prior.grid, w)


def local_predict_moments(model: StateSpaceModel, filt: GaussianMoments) -> GaussianMoments:
    """EKF time update of the filtering moments, used to place the next grid."""
    mean = model.dynamics(filt.mean)
    jac = model.dynamics_jacobian(filt.mean)
    cov = jac @ filt.cov @ jac.T + model.process_noise_cov
    return GaussianMoments(mean, 0.5 * (cov + cov.T))
