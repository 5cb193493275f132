"""Grid-based Bayesian filters (Eulerian and Lagrangian) with a particle-filter baseline."""

from .errors import (ConfigError, DegenerateDensityError, FilterDivergence, GridDesignError,
                     GridFlowError, SingularJacobianError)
from .model import MODELS, StateSpaceModel, get_model, simulate_trajectory
from .pmd import GaussianMoments, Grid, PointMassDensity, design_grid, gaussian_pmd, pmd_moments

__all__ = [
    "ConfigError", "DegenerateDensityError", "FilterDivergence", "GridDesignError",
    "GridFlowError", "SingularJacobianError", "MODELS", "StateSpaceModel", "get_model",
    "simulate_trajectory", "GaussianMoments", "Grid", "PointMassDensity", "design_grid",
    "gaussian_pmd", "pmd_moments",
]

__version__ = "0.1.0"
