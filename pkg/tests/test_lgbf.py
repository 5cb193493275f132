import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridflow.common import local_predict_moments
from gridflow.egbf import egbf_predict, egbf_step
from gridflow.errors import DegenerateDensityError, SingularJacobianError
from gridflow.lgbf import (advect, back_propagate, diffuse, lgbf_predict, lgbf_predict_on_grid, lgbf_step,
                           linear_convolve)
from gridflow.model import henon_model, linear2d_model, linear_model
from gridflow.pmd import (GaussianMoments, Grid, PointMassDensity, design_grid, gaussian_kernel_on_grid,
                          gaussian_pmd, pmd_moments)


def direct_convolution(values, kernel, delta):
    """out[n] = sum_m K[n - m + c] v[m] delta, by explicit loops."""
    counts = values.shape
    c = tuple((k - 1) // 2 for k in counts)
    out = np.zeros(counts)
    for n in itertools.product(*map(range, counts)):
        acc = 0.0
        for m in itertools.product(*map(range, counts)):
            j = tuple(ni - mi + ci for ni, mi, ci in zip(n, m, c))
            if all(0 <= ji < k for ji, k in zip(j, counts)):
                acc += kernel[j] * values[m]
        out[n] = acc * delta
    return out


def test_back_propagate_examples(identity2d, henon):
    g = Grid([-1.0, -0.5], [0.1, 0.05], (11, 11))
    bp = back_propagate(g, identity2d())
    np.testing.assert_array_equal(bp.points, g.points())
    np.testing.assert_allclose(bp.cell_volumes, g.cell_volume, rtol=1e-15)
    hb = back_propagate(g, henon)
    np.testing.assert_allclose(hb.cell_volumes, g.cell_volume / 0.3, rtol=1e-12)
    np.testing.assert_array_equal(hb.points, henon.dynamics_inverse(g.points()))
    A = np.array([[2.0, 0.3], [0.1, 0.7]])
    lin = linear_model(A, [[1.0, 0.0]], 0.01 * np.eye(2), [[1.0]], [0, 0], np.eye(2))
    lb = back_propagate(g, lin)
    np.testing.assert_allclose(lb.points, g.points() @ np.linalg.inv(A).T, atol=1e-14)
    np.testing.assert_allclose(lb.cell_volumes, g.cell_volume / abs(np.linalg.det(A)), rtol=1e-12)


def test_singular_jacobian_rejected():
    g = Grid([-1.0, -1.0], [0.5, 0.5], (5, 5))
    lin = linear_model(np.array([[1.0, 0.0], [0.0, 1e-320]]), [[1.0, 0.0]], 0.01 * np.eye(2), [[1.0]],
                       [0, 0], np.eye(2))
    # the inverse is never consulted once the Jacobian is singular
    object.__setattr__(lin, "dynamics_inverse", lambda y: y)
    with pytest.raises(SingularJacobianError, match="singular dynamics Jacobian"):
        back_propagate(g, lin)


def test_advect_identity_is_exact(identity2d):
    filt = gaussian_pmd(GaussianMoments([0.1, 0.2], np.diag([0.3, 0.1])), 5, (21, 21))
    out = advect(filt, back_propagate(filt.grid, identity2d()), filt.grid)
    np.testing.assert_array_equal(out, filt.weights)


def test_advect_volume_preserving_delta():
    theta = 0.3
    A = np.array([[1.0, 0.5], [0.0, 1.0]])  # shear, det 1
    lin = linear_model(A, [[1.0, 0.0]], 0.01 * np.eye(2), [[1.0]], [0, 0], np.eye(2))
    g = Grid([-2.0, -2.0], [0.25, 0.25], (17, 17))
    w = np.zeros(g.counts)
    w[8, 8] = 1.0 / g.cell_volume
    filt = PointMassDensity(g, w)
    out = advect(filt, back_propagate(g, lin), g)
    assert abs(out.sum() * g.cell_volume - 1.0) < 1e-12
    # A maps the centre onto itself, so the mass stays on the central cell
    assert out[8, 8] == pytest.approx(1.0 / g.cell_volume, rel=1e-12)
    del theta


def test_advect_lost_mass(henon):
    filt = gaussian_pmd(GaussianMoments([0.0, 0.0], np.diag([0.01, 0.01])), 5, (11, 11))
    far = Grid([40.0, 40.0], [0.01, 0.01], (11, 11))
    with pytest.raises(DegenerateDensityError, match="advection lost all mass"):
        advect(filt, back_propagate(far, henon), far)


def test_advect_matches_sampled_pushforward(henon):
    rng = np.random.default_rng(11)
    filt = gaussian_pmd(GaussianMoments([0.1, 0.05], np.diag([0.01, 0.004])), 5, (61, 61))
    mom = local_predict_moments(henon, pmd_moments(filt))
    g = design_grid(GaussianMoments(mom.mean, mom.cov - henon.process_noise_cov + np.diag([1e-6, 1e-8])), 6, (61, 61))
    adv = PointMassDensity(g, advect(filt, back_propagate(g, henon), g))
    p = filt.weights.ravel() * filt.grid.cell_volume
    idx = rng.choice(p.size, size=1_000_000, p=p / p.sum())
    x = filt.grid.points()[idx] + (rng.uniform(size=(idx.size, 2)) - 0.5) * filt.grid.spacing
    y = henon.dynamics(x)
    se = y.std(axis=0) / np.sqrt(idx.size)
    assert np.all(np.abs(pmd_moments(adv).mean - y.mean(axis=0)) <= 3 * se)


def test_diffuse_delta_gives_kernel():
    g = Grid([-1.0, -2.0], [0.1, 0.2], (21, 15))
    q = np.array([[0.03, 0.01], [0.01, 0.08]])
    adv = np.zeros(g.counts)
    adv[g.center_index] = 1.0 / g.cell_volume
    out = diffuse(adv, g, q)
    k = gaussian_kernel_on_grid(g, q)
    np.testing.assert_allclose(out, k / (k.sum() * g.cell_volume), rtol=1e-9, atol=1e-12 * k.max())


def test_diffuse_tiny_noise_is_identity():
    g = Grid([-1.0, -1.0], [0.1, 0.1], (21, 21))
    filt = gaussian_pmd(GaussianMoments([0.0, 0.1], np.diag([0.1, 0.05])), 5, (21, 21))
    out = diffuse(filt.weights, filt.grid, 1e-8 * np.eye(2))
    np.testing.assert_allclose(out, filt.weights, rtol=1e-9, atol=1e-12 * filt.weights.max())
    del g


@pytest.mark.parametrize("counts", [(7,), (9, 7), (5, 3, 5)])
def test_linear_convolution_matches_direct(counts, rng):
    v = rng.uniform(size=counts)
    k = rng.uniform(size=counts)
    ref = direct_convolution(v, k, 0.37)
    np.testing.assert_allclose(linear_convolve(v, k, 0.37), ref, rtol=1e-12, atol=1e-14 * ref.max())


def test_convolution_is_not_circular():
    v = np.zeros(9)
    v[0] = 1.0
    k = np.zeros(9)
    k[4 + 2] = 1.0  # shift by +2
    out = linear_convolve(v, k, 1.0)
    np.testing.assert_allclose(out, np.eye(9)[2], atol=1e-15)
    v = np.zeros(9)
    v[8] = 1.0
    # shifting past the edge drops the mass instead of wrapping
    assert np.abs(linear_convolve(v, k, 1.0)).max() < 1e-15


def test_convolution_mass_and_mean():
    # grid wide enough that neither the density nor the kernel reaches the edge,
    # and kernel width 3 cells so that the Riemann deficit is negligible
    g = Grid([-4.0, -4.0], [0.1, 0.1], (81, 81))
    q = np.array([[0.09, 0.02], [0.02, 0.09]])
    filt = gaussian_pmd(GaussianMoments([0.0, 0.0], np.diag([0.16, 0.16])), 10, (81, 81))
    assert np.allclose(filt.grid.spacing, g.spacing)
    raw = linear_convolve(filt.weights, gaussian_kernel_on_grid(g, q), g.cell_volume)
    assert abs(raw.sum() * g.cell_volume - 1.0) < 1e-9
    before = pmd_moments(filt)
    after = pmd_moments(PointMassDensity(g, diffuse(filt.weights, g, q)))
    assert np.all(np.abs(after.mean - before.mean) <= 1e-6 * (1 + np.linalg.norm(before.mean)))
    np.testing.assert_allclose(after.cov, before.cov + q, rtol=1e-6)


def test_identity_prediction_adds_q(identity2d):
    m = identity2d(q=0.02)
    filt = gaussian_pmd(GaussianMoments([0.3, -0.1], np.array([[0.1, 0.02], [0.02, 0.05]])), 5, (41, 41))
    pred = lgbf_predict(filt, m, 5.0, (41, 41))
    before, after = pmd_moments(filt), pmd_moments(pred)
    np.testing.assert_allclose(after.mean, before.mean, atol=1e-6)
    np.testing.assert_allclose(after.cov, before.cov + m.process_noise_cov, rtol=0.02,
                               atol=0.02 * np.abs(before.cov + m.process_noise_cov).max())


def test_cke_agreement_with_egbf():
    for model, n, bound in ((linear2d_model(), 61, 5e-3), (henon_model(), 41, 0.05)):
        filt = gaussian_pmd(GaussianMoments(model.initial_mean, model.initial_cov), 5, (n, n))
        g = design_grid(local_predict_moments(model, pmd_moments(filt)), 5, (n, n))
        a = lgbf_predict_on_grid(filt, g, model).weights
        b = egbf_predict(filt, g, model).weights
        assert np.abs(a - b).sum() * g.cell_volume <= bound


def test_interpolation_error_is_second_order():
    model = linear2d_model()
    tv = []
    for n in (31, 61):
        filt = gaussian_pmd(GaussianMoments(model.initial_mean, model.initial_cov), 5, (n, n))
        g = design_grid(local_predict_moments(model, pmd_moments(filt)), 5, (n, n))
        tv.append(np.abs(lgbf_predict_on_grid(filt, g, model).weights
                         - egbf_predict(filt, g, model).weights).sum() * g.cell_volume)
    assert 3.0 < tv[0] / tv[1] < 5.0


def test_step_deterministic_and_close_to_egbf(henon):
    filt = gaussian_pmd(GaussianMoments([0.1, 0.0], np.diag([0.01, 0.01])), 5, (31, 31))
    a = lgbf_step(filt, [0.8], henon, 5.0, (31, 31))
    b = lgbf_step(filt, [0.8], henon, 5.0, (31, 31))
    np.testing.assert_array_equal(a[0].weights, b[0].weights)
    np.testing.assert_array_equal(a[1].weights, b[1].weights)
    e = egbf_step(filt, [0.8], henon, 5.0, (31, 31))
    diff = np.abs(pmd_moments(a[1]).mean - pmd_moments(e[1]).mean)
    assert np.all(diff <= a[1].grid.spacing)


def test_eleven_step_run_stays_valid(henon):
    from gridflow.common import likelihood, measurement_update
    from gridflow.model import simulate_trajectory
    _, z = simulate_trajectory(henon, 10, seed=2)
    prior = gaussian_pmd(GaussianMoments(henon.initial_mean, henon.initial_cov), 5, (31, 31))
    filt = measurement_update(prior, likelihood(henon, prior.grid, z[0]))
    for k in range(1, 11):
        pred, filt = lgbf_step(filt, z[k], henon, 5.0, (31, 31))
        for p in (pred, filt):
            assert np.all(p.weights >= 0)
            assert abs(p.mass - 1.0) < 1e-12


def test_trace_collects_intermediates(henon):
    filt = gaussian_pmd(GaussianMoments([0.0, 0.0], np.diag([0.01, 0.01])), 5, (11, 11))
    trace = {}
    lgbf_predict(filt, henon, 5.0, (11, 11), trace)
    assert set(trace) == {"filt_moments", "pred_moments", "grid", "back_propagated", "advected"}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_fft_diffusion_random_instances(seed):
    rng = np.random.default_rng(seed)
    counts = (int(rng.choice([3, 5, 7, 9])), int(rng.choice([3, 5, 7])))
    v = rng.uniform(size=counts)
    k = rng.uniform(size=counts)
    ref = direct_convolution(v, k, 1.0)
    assert np.max(np.abs(linear_convolve(v, k, 1.0) - ref) / np.abs(ref).max()) <= 1e-10
