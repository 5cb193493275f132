"""
State-space models with invertible dynamics.

    x_{k+1} = f(x_k) + w_k,   w_k ~ N(0, Q)
    z_k     = h(x_k) + v_k,   v_k ~ N(0, R)

All model functions are vectorised over leading axes: a state array of shape
(..., n_x) maps to (..., n_x) for f and f^-1, to (..., n_x, n_x) for the
Jacobian and to (..., n_z) for h. They are built from module-level functions
bound with functools.partial so that models pickle cleanly.

Provided systems:
    henon_model   - 2D Henon map observed through its first coordinate
    ct5d_model    - coordinated turn with unknown rate, bearing/range radar
    linear_model  - generic linear-Gaussian model (used for sanity checks)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional, Tuple

import numpy as np

VectorFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    """Nonlinear model with additive Gaussian noises and an analytic inverse.

    Attributes:
        state_dim: n_x.
        meas_dim: n_z.
        dynamics: f, vectorised over leading axes.
        dynamics_inverse: f^-1.
        dynamics_jacobian: df/dx evaluated at the given state(s).
        measurement: h.
        process_noise_cov: Q, symmetric positive semidefinite (n_x, n_x).
        meas_noise_cov: R, symmetric positive definite (n_z, n_z).
        initial_mean: mean of p(x_0).
        initial_cov: covariance of p(x_0).
        angular_meas_mask: True where a measurement component is an angle.
        name: registry identifier.
        position_indices: state components emitted as trajectory plot data.
        working_region: optional (lower, upper) box outside which the model
            is not considered; simulated truths leaving it are redrawn.
    """

    state_dim: int
    meas_dim: int
    dynamics: VectorFn
    dynamics_inverse: VectorFn
    dynamics_jacobian: VectorFn
    measurement: VectorFn
    process_noise_cov: np.ndarray
    meas_noise_cov: np.ndarray
    initial_mean: np.ndarray
    initial_cov: np.ndarray
    angular_meas_mask: np.ndarray = field(default=None)
    name: str = "custom"
    position_indices: Tuple[int, ...] = ()
    working_region: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.process_noise_cov, dtype=float))
        r = np.atleast_2d(np.asarray(self.meas_noise_cov, dtype=float))
        m0 = np.atleast_1d(np.asarray(self.initial_mean, dtype=float))
        p0 = np.atleast_2d(np.asarray(self.initial_cov, dtype=float))
        if q.shape != (self.state_dim, self.state_dim):
            raise ValueError(f"process_noise_cov must be {self.state_dim}x{self.state_dim}")
        if r.shape != (self.meas_dim, self.meas_dim):
            raise ValueError(f"meas_noise_cov must be {self.meas_dim}x{self.meas_dim}")
        if m0.shape != (self.state_dim,) or p0.shape != q.shape:
            raise ValueError("initial moments do not match state_dim")
        if not (np.allclose(q, q.T) and np.allclose(r, r.T)):
            raise ValueError("noise covariances must be symmetric")
        if np.linalg.eigvalsh(r).min() <= 0:
            raise ValueError("meas_noise_cov must be positive definite")
        mask = self.angular_meas_mask
        mask = np.zeros(self.meas_dim, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if mask.shape != (self.meas_dim,):
            raise ValueError("angular_meas_mask must have one entry per measurement component")
        positions = tuple(self.position_indices) or tuple(range(self.state_dim))
        for name, value in (("process_noise_cov", q), ("meas_noise_cov", r),
                            ("initial_mean", m0), ("initial_cov", p0),
                            ("angular_meas_mask", mask), ("position_indices", positions)):
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
            object.__setattr__(self, name, value)
        if self.working_region is not None:
            lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (self.state_dim,)) for b in self.working_region)
            object.__setattr__(self, "working_region", (lo, hi))

    def in_working_region(self, states) -> bool:
        if self.working_region is None:
            return bool(np.all(np.isfinite(states)))
        lo, hi = self.working_region
        states = np.asarray(states, dtype=float)
        return bool(np.all((states >= lo) & (states <= hi)))


def covariance_factor(cov: np.ndarray) -> np.ndarray:
    """Return S with S @ S.T == cov for a symmetric PSD matrix.

    Zero-variance components give exactly zero columns, so sampling with a
    degenerate covariance leaves those components untouched.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if np.count_nonzero(cov - np.diag(np.diag(cov))) == 0:
        d = np.diag(cov)
        if np.any(d < 0):
            raise ValueError("covariance has negative variances")
        return np.diag(np.sqrt(d))
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < -1e-10 * max(1.0, abs(vals.max())):
        raise ValueError("covariance is not positive semidefinite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def numerical_jacobian(fn: VectorFn, x, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at a single state ``x``."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    n = x.size
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        cols.append((np.asarray(fn(x + e), dtype=float) - np.asarray(fn(x - e), dtype=float)) / (2 * step))
    return np.stack(cols, axis=-1)


def simulate_trajectory(model: StateSpaceModel, steps: int, seed) -> Tuple[np.ndarray, np.ndarray]:
    """Draw a truth trajectory x_0..x_steps and measurements z_0..z_steps.

    ``seed`` may be anything accepted by ``numpy.random.default_rng``. The
    draw order is x_0, then (v_k, w_k) for each k, so a given seed always
    reproduces the same sequences.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    s0 = covariance_factor(model.initial_cov)
    sq = covariance_factor(model.process_noise_cov)
    sr = covariance_factor(model.meas_noise_cov)
    states = np.empty((steps + 1, model.state_dim))
    meas = np.empty((steps + 1, model.meas_dim))
    x = model.initial_mean + s0 @ rng.standard_normal(model.state_dim)
    for k in range(steps + 1):
        states[k] = x
        meas[k] = model.measurement(x) + sr @ rng.standard_normal(model.meas_dim)
        w = sq @ rng.standard_normal(model.state_dim)
        if k < steps:
            x = model.dynamics(x) + w
    return states, meas


# --------------------------------------------------------------------------
# Henon map
# --------------------------------------------------------------------------

def _henon_f(x, a, b):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    out[..., 0] = 1.0 - a * x[..., 0] ** 2 + x[..., 1]
    out[..., 1] = b * x[..., 0]
    return out


def _henon_finv(y, a, b):
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    x1 = y[..., 1] / b
    out[..., 0] = x1
    out[..., 1] = y[..., 0] - 1.0 + a * x1 ** 2
    return out


def _henon_jac(x, a, b):
    x = np.asarray(x, dtype=float)
    jac = np.zeros(x.shape + (2,))
    jac[..., 0, 0] = -2.0 * a * x[..., 0]
    jac[..., 0, 1] = 1.0
    jac[..., 1, 0] = b
    return jac


def _first_component(x):
    return np.asarray(x, dtype=float)[..., :1]


def henon_model(a=1.4, b=0.3, q=(1e-3, 1e-5), r=0.01,
                initial_mean=(0.0, 0.0), initial_cov=(0.01, 0.01)) -> StateSpaceModel:
    """Henon map with h(x) = x(1).

    ``q`` and ``initial_cov`` are diagonals; ``r`` is the scalar measurement
    noise variance.
    """
    return StateSpaceModel(
        state_dim=2,
        meas_dim=1,
        dynamics=partial(_henon_f, a=float(a), b=float(b)),
        dynamics_inverse=partial(_henon_finv, a=float(a), b=float(b)),
        dynamics_jacobian=partial(_henon_jac, a=float(a), b=float(b)),
        measurement=_first_component,
        process_noise_cov=np.diag(np.broadcast_to(np.asarray(q, dtype=float), (2,))),
        meas_noise_cov=np.array([[float(r)]]),
        initial_mean=np.asarray(initial_mean, dtype=float),
        initial_cov=np.diag(np.broadcast_to(np.asarray(initial_cov, dtype=float), (2,))),
        name="henon",
        # noisy orbits occasionally leave the attractor and run off to -inf
        working_region=((-2.0, -1.0), (2.0, 1.0)),
    )


# --------------------------------------------------------------------------
# Coordinated turn with unknown rate, state (p1, v1, p2, v2, omega)
# --------------------------------------------------------------------------

_TAYLOR_EPS = 1e-6
# the derivative formulas cancel badly long before 1e-6, so they switch to
# their series much earlier
_TAYLOR_EPS_DERIV = 1e-2


def _turn_coefficients(w):
    """sin(w)/w and (1 - cos w)/w, with series fallback near w = 0."""
    w = np.asarray(w, dtype=float)
    small = np.abs(w) < _TAYLOR_EPS
    safe = np.where(small, 1.0, w)
    w2 = w * w
    s = np.where(small, 1.0 - w2 / 6.0 + w2 * w2 / 120.0 - w2 ** 3 / 5040.0, np.sin(safe) / safe)
    # 1 - cos w = 2 sin^2(w/2) avoids cancellation for small w
    c_direct = 2.0 * np.sin(0.5 * safe) ** 2 / safe
    c = np.where(small, w / 2.0 - w * w2 / 24.0 + w * w2 * w2 / 720.0 - w * w2 ** 3 / 40320.0, c_direct)
    return s, c


def _turn_coefficient_derivatives(w):
    w = np.asarray(w, dtype=float)
    small = np.abs(w) < _TAYLOR_EPS_DERIV
    safe = np.where(small, 1.0, w)
    w2 = w * w
    ds = np.where(small, -w / 3.0 + w * w2 / 30.0 - w * w2 * w2 / 840.0 + w * w2 ** 3 / 45360.0,
                  (safe * np.cos(safe) - np.sin(safe)) / safe ** 2)
    dc = np.where(small, 0.5 - w2 / 8.0 + w2 * w2 / 144.0 - w2 ** 3 / 5760.0,
                  (safe * np.sin(safe) - 2.0 * np.sin(0.5 * safe) ** 2) / safe ** 2)
    return ds, dc


def _ct_f(x):
    x = np.asarray(x, dtype=float)
    p1, v1, p2, v2, w = (x[..., i] for i in range(5))
    s, c = _turn_coefficients(w)
    cw, sw = np.cos(w), np.sin(w)
    out = np.empty_like(x)
    out[..., 0] = p1 + s * v1 - c * v2
    out[..., 1] = cw * v1 - sw * v2
    out[..., 2] = p2 + c * v1 + s * v2
    out[..., 3] = sw * v1 + cw * v2
    out[..., 4] = w
    return out


def _ct_finv(y):
    y = np.asarray(y, dtype=float)
    p1, v1, p2, v2, w = (y[..., i] for i in range(5))
    s, c = _turn_coefficients(w)
    cw, sw = np.cos(w), np.sin(w)
    eta1 = cw * v1 + sw * v2
    eta2 = -sw * v1 + cw * v2
    out = np.empty_like(y)
    out[..., 0] = p1 - s * eta1 + c * eta2
    out[..., 1] = eta1
    out[..., 2] = p2 - c * eta1 - s * eta2
    out[..., 3] = eta2
    out[..., 4] = w
    return out


def _ct_jac(x):
    x = np.asarray(x, dtype=float)
    v1, v2, w = x[..., 1], x[..., 3], x[..., 4]
    s, c = _turn_coefficients(w)
    ds, dc = _turn_coefficient_derivatives(w)
    cw, sw = np.cos(w), np.sin(w)
    jac = np.zeros(x.shape + (5,))
    jac[..., 0, 0] = 1.0
    jac[..., 0, 1] = s
    jac[..., 0, 3] = -c
    jac[..., 0, 4] = ds * v1 - dc * v2
    jac[..., 1, 1] = cw
    jac[..., 1, 3] = -sw
    jac[..., 1, 4] = -sw * v1 - cw * v2
    jac[..., 2, 1] = c
    jac[..., 2, 2] = 1.0
    jac[..., 2, 3] = s
    jac[..., 2, 4] = dc * v1 + ds * v2
    jac[..., 3, 1] = sw
    jac[..., 3, 3] = cw
    jac[..., 3, 4] = cw * v1 - sw * v2
    jac[..., 4, 4] = 1.0
    return jac


def _bearing_range(x):
    x = np.asarray(x, dtype=float)
    return np.stack([np.arctan2(x[..., 2], x[..., 0]), np.hypot(x[..., 0], x[..., 2])], axis=-1)


def ct5d_model(q_acc=0.05, q_turn=1e-6, sigma_bearing=0.01, sigma_range=5.0,
               initial_mean=(1000.0, 10.0, 1000.0, -10.0, 0.02),
               initial_cov=(100.0, 4.0, 100.0, 4.0, 1e-4)) -> StateSpaceModel:
    """Coordinated turn with unknown rate and a radar at the origin.

    The sampling period is one time unit and is absorbed into the map.
    Process noise is the discretised white-noise acceleration model per
    axis (intensity ``q_acc``) plus an independent turn-rate variance
    ``q_turn``. The Jacobian is analytic.
    """
    block = q_acc * np.array([[1.0 / 3.0, 0.5], [0.5, 1.0]])
    q = np.zeros((5, 5))
    q[0:2, 0:2] = block
    q[2:4, 2:4] = block
    q[4, 4] = q_turn
    return StateSpaceModel(
        state_dim=5,
        meas_dim=2,
        dynamics=_ct_f,
        dynamics_inverse=_ct_finv,
        dynamics_jacobian=_ct_jac,
        measurement=_bearing_range,
        process_noise_cov=q,
        meas_noise_cov=np.diag([sigma_bearing ** 2, sigma_range ** 2]),
        initial_mean=np.asarray(initial_mean, dtype=float),
        initial_cov=np.diag(np.broadcast_to(np.asarray(initial_cov, dtype=float), (5,))),
        angular_meas_mask=np.array([True, False]),
        name="ct5d",
        position_indices=(0, 2),
    )


# --------------------------------------------------------------------------
# Linear-Gaussian
# --------------------------------------------------------------------------

def _matvec(x, mat):
    return np.asarray(x, dtype=float) @ mat.T


def _constant_jacobian(x, mat):
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(mat, x.shape[:-1] + mat.shape).copy()


def linear_model(A, H, Q, R, initial_mean, initial_cov, name: str = "linear") -> StateSpaceModel:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    A_inv = np.linalg.inv(A)
    return StateSpaceModel(
        state_dim=A.shape[0],
        meas_dim=H.shape[0],
        dynamics=partial(_matvec, mat=A),
        dynamics_inverse=partial(_matvec, mat=A_inv),
        dynamics_jacobian=partial(_constant_jacobian, mat=A),
        measurement=partial(_matvec, mat=H),
        process_noise_cov=np.atleast_2d(Q),
        meas_noise_cov=np.atleast_2d(R),
        initial_mean=np.atleast_1d(initial_mean),
        initial_cov=np.atleast_2d(initial_cov),
        name=name,
    )


def linear1d_model(a=0.9, q=1.0, r=1.0, initial_mean=0.0, initial_cov=1.0) -> StateSpaceModel:
    return linear_model([[a]], [[1.0]], [[q]], [[r]], [initial_mean], [[initial_cov]], name="linear1d")


def linear2d_model(r=0.5) -> StateSpaceModel:
    """Rotating, contracting 2D linear system observed through x(1)."""
    return linear_model(
        A=[[0.9, 0.5], [-0.2, 0.8]],
        H=[[1.0, 0.0]],
        Q=[[0.1, 0.02], [0.02, 0.05]],
        R=[[r]],
        initial_mean=[0.0, 0.0],
        initial_cov=[[1.0, 0.0], [0.0, 1.0]],
        name="linear2d",
    )


MODELS = {
    "henon": henon_model,
    "ct5d": ct5d_model,
    "linear1d": linear1d_model,
    "linear2d": linear2d_model,
}


def get_model(name: str, overrides: Optional[dict] = None) -> StateSpaceModel:
    """Build a registered model, applying keyword overrides to its factory."""
    try:
        factory = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return factory(**(overrides or {}))


def model_dim(name: str) -> int:
    return get_model(name).state_dim


def regularized_cov(cov: np.ndarray) -> np.ndarray:
    """Q + eps*I with eps = 1e-12 * trace(Q) / n, for places that invert Q."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = cov.shape[0]
    return cov + (1e-12 * np.trace(cov) / n) * np.eye(n)
