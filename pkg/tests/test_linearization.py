import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust_smoothing.experiments import bearings, bearings_jacobian
from robust_smoothing.linearization import (
    Cubature,
    Unscented,
    cubature_points,
    linearize_ssm,
    slr_linearize,
    slr_moments,
    taylor_linearize,
    unscented_points,
)
from robust_smoothing.state_space import Gaussian, TrajectoryEstimate

from conftest import central_jacobian


def _spd(rng, d):
    A = rng.standard_normal((d, d))
    return A @ A.T + 0.5 * np.eye(d)


def _moments(pts):
    m = pts.mean_weights @ pts.points
    D = pts.points - m
    return m, (D * pts.cov_weights[:, None]).T @ D


def test_taylor_identity():
    F, b, Om = taylor_linearize(lambda x: x, lambda x: np.eye(3), np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(F, np.eye(3))
    np.testing.assert_array_equal(b, np.zeros(3))
    np.testing.assert_array_equal(Om, np.zeros((3, 3)))


def test_taylor_square():
    F, b, _ = taylor_linearize(lambda x: x**2, lambda x: np.diag(2 * x), np.array([2.0]))
    np.testing.assert_allclose(F, [[4.0]])
    np.testing.assert_allclose(b, [-4.0])


def test_taylor_bearings_matches_finite_differences():
    sensors = np.array([[-1.5, 0.5], [1.0, 1.0]])
    x = np.array([0.3, -0.7, 1.0, 0.2, 0.1])
    F, _, _ = taylor_linearize(lambda z: bearings(z, sensors), lambda z: bearings_jacobian(z, sensors), x)
    J = central_jacobian(lambda z: bearings(z, sensors), x)
    assert np.abs(F - J).max() <= 1e-6 * np.abs(J).max()


def test_unscented_points_1d():
    pts = unscented_points(Gaussian([0.0], [[1.0]]), kappa=2.0)
    np.testing.assert_allclose(pts.points.ravel(), [0.0, np.sqrt(3), -np.sqrt(3)])
    np.testing.assert_allclose(pts.mean_weights, [2 / 3, 1 / 6, 1 / 6])


def test_cubature_points_low_dim():
    pts = cubature_points(Gaussian([0.0], [[1.0]]))
    np.testing.assert_allclose(sorted(pts.points.ravel()), [-1.0, 1.0])
    np.testing.assert_allclose(pts.mean_weights, [0.5, 0.5])
    pts = cubature_points(Gaussian(np.zeros(2), np.eye(2)))
    r2 = np.sqrt(2)
    expected = {(r2, 0.0), (0.0, r2), (-r2, 0.0), (0.0, -r2)}
    assert {tuple(np.round(p, 12) + 0.0) for p in pts.points} == {tuple(np.round(e, 12)) for e in expected}
    np.testing.assert_allclose(pts.mean_weights, 0.25)


@pytest.mark.parametrize("scheme", [Cubature(), Unscented()], ids=["cubature", "unscented"])
@pytest.mark.parametrize("d", [3, 4])
def test_sigma_points_reproduce_moments(scheme, d):
    rng = np.random.default_rng(d)
    g = Gaussian(rng.standard_normal(d), _spd(rng, d))
    m, P = _moments(scheme(g))
    np.testing.assert_allclose(m, g.mean, atol=1e-12)
    np.testing.assert_allclose(P, g.cov, atol=1e-10)


def test_slr_moments_identity_and_affine():
    rng = np.random.default_rng(1)
    g = Gaussian(rng.standard_normal(3), _spd(rng, 3))
    mo = slr_moments(lambda x: x, g, cubature_points(g))
    np.testing.assert_allclose(mo.zbar, g.mean, atol=1e-12)
    np.testing.assert_allclose(mo.Psi, g.cov, atol=1e-10)
    np.testing.assert_allclose(mo.Phi, g.cov, atol=1e-10)
    A, c = rng.standard_normal((2, 3)), rng.standard_normal(2)
    mo = slr_moments(lambda x: x @ A.T + c, g, unscented_points(g, 0.0))
    np.testing.assert_allclose(mo.zbar, A @ g.mean + c, atol=1e-10)
    np.testing.assert_allclose(mo.Psi, g.cov @ A.T, atol=1e-10)
    np.testing.assert_allclose(mo.Phi, A @ g.cov @ A.T, atol=1e-10)


def test_slr_moments_square_is_blind_to_even_terms_with_cubature():
    g = Gaussian([0.0], [[1.0]])
    mo = slr_moments(lambda x: x**2, g, cubature_points(g))
    np.testing.assert_allclose([mo.zbar[0], mo.Psi[0, 0], mo.Phi[0, 0]], [1.0, 0.0, 0.0], atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_slr_exact_for_affine_maps(d, m, seed):
    rng = np.random.default_rng(seed)
    A, c = rng.standard_normal((m, d)), rng.standard_normal(m)
    g = Gaussian(rng.standard_normal(d), _spd(rng, d))
    F, b, Om = slr_linearize(lambda x: x @ A.T + c, g)
    np.testing.assert_allclose(F, A, atol=1e-9)
    np.testing.assert_allclose(b, c, atol=1e-9)
    assert np.linalg.norm(Om) <= 1e-9


def test_slr_identity():
    F, b, Om = slr_linearize(lambda x: x, Gaussian([1.0, 2.0], np.diag([3.0, 0.5])), Unscented())
    np.testing.assert_allclose(F, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(b, 0.0, atol=1e-12)
    np.testing.assert_allclose(Om, 0.0, atol=1e-12)


def test_slr_square_near_taylor():
    F, _, Om = slr_linearize(lambda x: x**2, Gaussian([1.0], [[0.01]]), Unscented(2.0))
    assert abs(F[0, 0] - 2.0) <= 0.1
    assert Om[0, 0] >= 0


def test_slr_rejects_ill_conditioned_cov():
    with pytest.raises(np.linalg.LinAlgError):
        slr_linearize(lambda x: x, Gaussian(np.zeros(2), np.diag([1.0, 1e-14])))


def test_linearize_ssm_linear_model_returns_model_matrices(linear_case):
    model, X, _ = linear_case
    rng = np.random.default_rng(0)
    traj = TrajectoryEstimate(X + rng.standard_normal(X.shape), np.stack([_spd(rng, 4) for _ in X]))
    for mode in ("taylor", "slr"):
        p = linearize_ssm(model, traj, mode)
        for k in range(model.horizon - 1):
            np.testing.assert_allclose(p.F[k], model.motion_jac(X[k], k), atol=1e-9)
            np.testing.assert_allclose(p.b[k], model.motion(np.zeros(4), k), atol=1e-9)
        for k in range(model.horizon):
            np.testing.assert_allclose(p.H[k], model.meas_jac(X[k], k), atol=1e-9)
        assert np.abs(p.Omega).max() <= 1e-9
        assert max(np.abs(g).max() for g in p.Gamma) <= 1e-9


def test_taylor_ignores_covariances(ct_small):
    model, X, _, init = ct_small
    p1 = linearize_ssm(model, init, "taylor")
    garbage = TrajectoryEstimate(init.means, np.full(init.covs.shape, np.nan))
    p2 = linearize_ssm(model, garbage, "taylor")
    np.testing.assert_array_equal(p1.F, p2.F)
    np.testing.assert_array_equal(p1.b, p2.b)
    for a, b in zip(p1.H, p2.H):
        np.testing.assert_array_equal(a, b)


def test_slr_tends_to_taylor_for_vanishing_covariance(ct_small):
    model, _, _, init = ct_small
    tiny = TrajectoryEstimate(init.means, np.broadcast_to(1e-8 * np.eye(5), init.covs.shape))
    pt, ps = linearize_ssm(model, init, "taylor"), linearize_ssm(model, tiny, "slr")
    np.testing.assert_allclose(ps.F, pt.F, atol=1e-3)
    np.testing.assert_allclose(ps.b, pt.b, atol=1e-3)
    for a, b in zip(ps.H, pt.H):
        np.testing.assert_allclose(a, b, atol=1e-3)


def test_linearize_ssm_unknown_method(ct_small):
    model, _, _, init = ct_small
    with pytest.raises(ValueError):
        linearize_ssm(model, init, "secant")
