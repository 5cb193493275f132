"""Equidistant grids and point-mass densities (PMDs) defined on them.

A PMD is a piecewise-constant density: weight ``P[m]`` is the density value
on the cell around lattice point ``m``, so ``sum(P) * cell_volume == 1``.
Weight tensors are always shaped like ``grid.counts`` and flattened in
row-major (C) multi-index order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateDensityError, GridDesignError

# normalize() leaves weights untouched when already this close to unit mass,
# which makes it idempotent bit for bit
_UNIT_MASS_TOL = 1e-13
# fractional lattice indices this close to an integer snap onto the node
_SNAP_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Grid:
    """Axis-aligned equidistant lattice with an odd point count per axis."""

    origin: np.ndarray
    spacing: np.ndarray
    counts: tuple

    def __post_init__(self):
        origin = np.atleast_1d(np.asarray(self.origin, dtype=float)).copy()
        spacing = np.atleast_1d(np.asarray(self.spacing, dtype=float)).copy()
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if not (origin.shape == spacing.shape == (len(counts),)):
            raise GridDesignError("origin, spacing and counts must have one entry per dimension")
        for i, c in enumerate(counts):
            if c < 1 or c % 2 == 0:
                raise GridDesignError(f"dimension {i + 1}: point count must be odd and positive, got {c}")
        if not np.all(np.isfinite(spacing)) or np.any(spacing <= 0):
            raise GridDesignError("spacing must be finite and positive")
        origin.setflags(write=False)
        spacing.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "counts", counts)

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def size(self) -> int:
        return math.prod(self.counts)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def center_index(self) -> tuple:
        return tuple((c - 1) // 2 for c in self.counts)

    @property
    def center(self) -> np.ndarray:
        return self.origin + np.array(self.center_index) * self.spacing

    def axes(self) -> list:
        return [o + np.arange(c) * d for o, d, c in zip(self.origin, self.spacing, self.counts)]

    def points(self) -> np.ndarray:
        """All lattice points, shape (N, dim), row-major multi-index order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def offsets(self) -> np.ndarray:
        """Lattice points relative to the central point, shape (N, dim).

        Computed from integer offsets so that opposite points are exact
        negatives of each other.
        """
        axes = [(np.arange(c) - (c - 1) // 2) * d for d, c in zip(self.spacing, self.counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        upper = self.origin + (np.array(self.counts) - 1) * self.spacing
        return np.all((x >= self.origin) & (x <= upper), axis=-1)


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "cov", np.atleast_2d(np.asarray(self.cov, dtype=float)))


@dataclass(frozen=True, eq=False)
class PointMassDensity:
    grid: Grid
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(self.grid.counts)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def mass(self) -> float:
        return float(self.weights.sum() * self.grid.cell_volume)


def floor_covariance(cov: np.ndarray) -> np.ndarray:
    """Symmetrise ``cov`` and raise its eigenvalues to at least 1e-12*max(1, trace)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    cov = 0.5 * (cov + cov.T)
    floor = 1e-12 * max(1.0, float(np.trace(cov)))
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() >= floor:
        return cov
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def design_grid(moments: GaussianMoments, kappa: float, counts: Sequence[int]) -> Grid:
    """Grid spanning mean +- kappa*sigma per axis, both endpoints included."""
    if kappa <= 0:
        raise GridDesignError("kappa must be positive")
    counts = tuple(int(c) for c in counts)
    mean = moments.mean
    if len(counts) != mean.size:
        raise GridDesignError(f"need {mean.size} point counts, got {len(counts)}")
    for i, c in enumerate(counts):
        if c < 3 or c % 2 == 0:
            raise GridDesignError(f"dimension {i + 1}: point count must be odd and >= 3, got {c}")
    var = np.diag(moments.cov)
    for i, v in enumerate(var):
        if not np.isfinite(v) or v <= 0:
            raise GridDesignError(f"dimension {i + 1}: non-positive variance {v!r}, cannot design grid")
    n = np.array(counts)
    spacing = 2.0 * kappa * np.sqrt(var) / (n - 1)
    origin = mean - (n - 1) // 2 * spacing
    return Grid(origin, spacing, counts)


def normalize(weights: np.ndarray, cell_volume: float) -> np.ndarray:
    """Clamp negatives to zero and scale so that ``sum * cell_volume == 1``."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        w = np.where(w < 0, 0.0, w)
    mass = float(w.sum()) * cell_volume
    if not np.isfinite(mass) or mass <= 0:
        raise DegenerateDensityError("degenerate density: no positive mass left to normalise")
    if mass < 1e-290:
        # near-subnormal masses lose precision in the division; rescale first
        w = w / w.max()
        mass = float(w.sum()) * cell_volume
    if abs(mass - 1.0) <= _UNIT_MASS_TOL:
        return w.copy() if w is weights else w
    return w / mass


def pmd_moments(pmd: PointMassDensity) -> GaussianMoments:
    """Mean and (floored) covariance by the midpoint rule."""
    pts = pmd.grid.points()
    p = pmd.weights.ravel() * pmd.grid.cell_volume
    mean = p @ pts
    d = pts - mean
    cov = (d * p[:, None]).T @ d
    return GaussianMoments(mean, floor_covariance(cov))


def _fractional_indices(grid: Grid, queries: np.ndarray) -> np.ndarray:
    t = (queries - grid.origin) / grid.spacing
    r = np.round(t)
    return np.where(np.abs(t - r) <= _SNAP_TOL, r, t)


def interpolate_weights(pmd: PointMassDensity, queries) -> np.ndarray:
    """Multilinear interpolation of PMD weights; zero outside the bounding box."""
    grid = pmd.grid
    q = np.asarray(queries, dtype=float)
    lead = q.shape[:-1]
    q = q.reshape(-1, grid.dim)
    t = _fractional_indices(grid, q)
    counts = np.array(grid.counts)
    inside = np.all((t >= 0) & (t <= counts - 1) & np.isfinite(t), axis=1)
    out = np.zeros(q.shape[0])
    if not inside.any():
        return out.reshape(lead)
    t = t[inside]
    # lower corner; clipped so that the far boundary uses frac == 1
    base = np.minimum(np.floor(t), np.maximum(counts - 2, 0)).astype(np.intp)
    frac = t - base
    strides = np.array([math.prod(grid.counts[i + 1:]) for i in range(grid.dim)], dtype=np.intp)
    flat = pmd.weights.ravel()
    base_flat = base @ strides
    acc = np.zeros(t.shape[0])
    for corner in itertools.product((0, 1), repeat=grid.dim):
        c = np.array(corner)
        if np.any(c > counts - 1):
            continue
        coeff = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        acc += coeff * flat[base_flat + c @ strides]
    out[inside] = acc
    return out.reshape(lead)


def gaussian_density(points: np.ndarray, mean, cov: np.ndarray) -> np.ndarray:
    """N(points; mean, cov) for points of shape (M, n)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("covariance is singular or not positive definite") from None
    n = cov.shape[0]
    d = np.asarray(points, dtype=float).reshape(-1, n) - np.asarray(mean, dtype=float)
    y = solve_triangular(chol, d.T, lower=True)
    quad = np.einsum("ij,ij->j", y, y)
    log_norm = 0.5 * n * math.log(2.0 * math.pi) + float(np.log(np.diag(chol)).sum())
    return np.exp(-0.5 * quad - log_norm)


def gaussian_kernel_on_grid(grid: Grid, cov: np.ndarray) -> np.ndarray:
    """Zero-mean Gaussian density at every lattice offset from the central point."""
    return gaussian_density(grid.offsets(), np.zeros(grid.dim), cov).reshape(grid.counts)


def gaussian_pmd(moments: GaussianMoments, kappa: float, counts: Sequence[int]) -> PointMassDensity:
    """Sample a Gaussian on a moment-designed grid and normalise it."""
    grid = design_grid(moments, kappa, counts)
    w = gaussian_density(grid.points(), moments.mean, moments.cov).reshape(grid.counts)
    return PointMassDensity(grid, normalize(w, grid.cell_volume))


# --------------------------------------------------------------------------
# text dumps
# --------------------------------------------------------------------------

def _fmt(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def save_pmd(path, pmd: PointMassDensity) -> Path:
    """Write a grid header followed by one CSV row per lattice point."""
    path = Path(path)
    g = pmd.grid
    cols = [f"x{i + 1}" for i in range(g.dim)] + ["weight"]
    lines = [
        "# gridflow-pmd v1",
        f"# origin={_fmt(g.origin)}",
        f"# spacing={_fmt(g.spacing)}",
        f"# counts={','.join(str(c) for c in g.counts)}",
        ",".join(cols),
    ]
    pts = g.points()
    for x, w in zip(pts, pmd.weights.ravel()):
        lines.append(f"{_fmt(x)},{float(w)!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_pmd(path) -> PointMassDensity:
    header = {}
    weights = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                if "=" in line:
                    key, value = line[1:].strip().split("=", 1)
                    header[key] = value
                continue
            if not line or line[0].isalpha():
                continue
            weights.append(float(line.rsplit(",", 1)[1]))
    grid = Grid(
        [float(v) for v in header["origin"].split(",")],
        [float(v) for v in header["spacing"].split(",")],
        tuple(int(v) for v in header["counts"].split(",")),
    )
    return PointMassDensity(grid, np.array(weights))


def save_point_cloud(path, points: np.ndarray, values: np.ndarray, value_name: str = "weight") -> Path:
    """CSV of scattered points (e.g. a back-propagated grid) with one value each."""
    path = Path(path)
    points = np.asarray(points).reshape(len(values), -1)
    cols = [f"x{i + 1}" for i in range(points.shape[1])] + [value_name]
    lines = [",".join(cols)]
    for x, v in zip(points, np.ravel(values)):
        lines.append(f"{_fmt(x)},{float(v)!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
