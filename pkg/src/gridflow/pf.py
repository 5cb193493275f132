"""Bootstrap particle filter with systematic resampling at every step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .common import log_likelihood
from .errors import DegenerateDensityError
from .model import StateSpaceModel, covariance_factor


@dataclass(eq=False)
class ParticleSet:
    """Particles with normalised weights and the filter's own random stream.

    ``mean``/``cov`` hold the weighted estimate taken just before the last
    resampling (None right after initialisation).
    """

    particles: np.ndarray
    weights: np.ndarray
    rng: np.random.Generator
    mean: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None


def pf_init(model: StateSpaceModel, n_particles: int, seed) -> ParticleSet:
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    rng = np.random.default_rng(seed)
    s0 = covariance_factor(model.initial_cov)
    particles = model.initial_mean + rng.standard_normal((n_particles, model.state_dim)) @ s0.T
    return ParticleSet(particles, np.full(n_particles, 1.0 / n_particles), rng)


def systematic_resample(weights, u: float) -> np.ndarray:
    """Indices picked by the stratified positions (u + j) / N, j = 0..N-1."""
    w = np.asarray(weights, dtype=float)
    n = w.size
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    cdf[-1] = 1.0
    positions = (u + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, positions, side="right"), n - 1)


def weighted_moments(particles: np.ndarray, weights: np.ndarray):
    mean = weights @ particles
    d = particles - mean
    cov = (d * weights[:, None]).T @ d
    return mean, 0.5 * (cov + cov.T)


def pf_update(ps: ParticleSet, z, model: StateSpaceModel) -> ParticleSet:
    """Weight by the likelihood of ``z``, record the estimate, then resample."""
    logw = np.log(ps.weights) + log_likelihood(model, ps.particles, z)
    top = logw.max()
    if not np.isfinite(top):
        raise DegenerateDensityError("all particle likelihoods are zero")
    w = np.exp(logw - top)
    w /= w.sum()
    mean, cov = weighted_moments(ps.particles, w)
    idx = systematic_resample(w, ps.rng.uniform())
    n = w.size
    return ParticleSet(ps.particles[idx], np.full(n, 1.0 / n), ps.rng, mean, cov)


def pf_propagate(ps: ParticleSet, model: StateSpaceModel) -> ParticleSet:
    sq = covariance_factor(model.process_noise_cov)
    noise = ps.rng.standard_normal(ps.particles.shape) @ sq.T
    return ParticleSet(model.dynamics(ps.particles) + noise, ps.weights, ps.rng)


def pf_step(ps: ParticleSet, z_next, model: StateSpaceModel) -> ParticleSet:
    return pf_update(pf_propagate(ps, model), z_next, model)
