import numpy as np
import pytest

from robust_smoothing.cost_functions import (
    IplsCostContext,
    ieks_cost,
    ipls_cost,
    linearized_cost,
    lm_cost,
    make_cost,
)
from robust_smoothing.gn_oracle import build_ieks_problem, build_ipls_problem
from robust_smoothing.iterative_smoothers import gn_iteration
from robust_smoothing.linearization import linearize_ssm
from robust_smoothing.state_space import Gaussian, MeasurementSequence, NonlinearSSM, TrajectoryEstimate


def _identity_model(K=4, d=2):
    I = np.eye(d)
    return NonlinearSSM(
        motion=lambda x, k: x, measurement=lambda x, k: x,
        motion_noise=np.stack([I] * (K - 1)), meas_noise=[I] * K, prior=Gaussian(np.zeros(d), I),
        motion_jacobian=lambda x, k: I, meas_jacobian=lambda x, k: I,
    )


def test_zero_residuals_give_zero_cost():
    m = _identity_model()
    assert ieks_cost(np.zeros((4, 2)), m, MeasurementSequence([np.zeros(2)] * 4)) == 0.0


def test_scalar_single_step():
    m = NonlinearSSM(
        motion=lambda x, k: x, measurement=lambda x, k: x, motion_noise=np.zeros((0, 1, 1)),
        meas_noise=[np.eye(1)], prior=Gaussian([0.0], [[1.0]]),
    )
    assert ieks_cost(np.array([[1.0]]), m, MeasurementSequence([np.zeros(1)])) == pytest.approx(1.0)


def test_ieks_cost_matches_stacked_residual(ct_small):
    model, X, y, _ = ct_small
    prob = build_ieks_problem(model, y)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = X + 0.3 * rng.standard_normal(X.shape)
        assert ieks_cost(x, model, y) == pytest.approx(prob.cost(x), rel=1e-10)


def test_ipls_cost_equals_ieks_cost_on_linear_model(linear_case):
    model, X, y = linear_case
    rng = np.random.default_rng(1)
    traj = TrajectoryEstimate(X, np.broadcast_to(np.eye(4), (50, 4, 4)))
    ctx = IplsCostContext.from_estimate(model, traj)
    for _ in range(5):
        x = X + rng.standard_normal(X.shape)
        assert ipls_cost(x, model, y, ctx) == pytest.approx(ieks_cost(x, model, y), rel=1e-10)


def test_ipls_cost_tends_to_ieks_cost(ct_small):
    model, X, y, init = ct_small
    K, d = X.shape
    ctx = IplsCostContext(model, np.broadcast_to(1e-12 * np.eye(d), (K, d, d)), np.zeros((K - 1, d, d)),
                          tuple(np.zeros((n, n)) for n in model.meas_dims))
    assert ipls_cost(init.means, model, y, ctx) == pytest.approx(ieks_cost(init.means, model, y), rel=1e-4)


def test_ipls_cost_matches_stacked_residual(ct_small):
    model, X, y, init = ct_small
    ctx = IplsCostContext.from_estimate(model, init)
    prob = build_ipls_problem(model, y, ctx)
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = X + 0.3 * rng.standard_normal(X.shape)
        assert ipls_cost(x, model, y, ctx) == pytest.approx(prob.cost(x), rel=1e-10)


def test_ipls_cost_rejects_foreign_context(ct_small, linear_case):
    model, X, y, init = ct_small
    ctx = IplsCostContext.from_estimate(model, init)
    other = linear_case[0]
    with pytest.raises(ValueError):
        ipls_cost(np.zeros((50, 4)), other, linear_case[2], ctx)


def test_lm_cost_examples(ct_small):
    model, X, y, _ = ct_small
    base = make_cost(model, y)
    assert lm_cost(base, X, X + 1.0, 0.0, np.eye(5)) == base(X)
    assert lm_cost(base, X, X, 3.0, np.eye(5)) == base(X)
    anchor = X.copy()
    anchor[4] += np.array([1.0, 2.0, 0.0, 0.0, -2.0])
    assert lm_cost(base, X, anchor, 2.0, np.eye(5)) == pytest.approx(base(X) + 9.0)


def test_lm_cost_rejects_negative_lambda(ct_small):
    model, X, y, _ = ct_small
    with pytest.raises(ValueError):
        lm_cost(make_cost(model, y), X, X, -1.0, np.eye(5))


def test_linearized_cost_is_minimized_by_smoothed_means(ct_small):
    model, _, y, init = ct_small
    for mode in ("taylor", "slr"):
        params = linearize_ssm(model, init, mode)
        best = gn_iteration(model, init, y, mode).means
        c0 = linearized_cost(best, model, params, y)
        rng = np.random.default_rng(3)
        for _ in range(10):
            assert linearized_cost(best + 1e-3 * rng.standard_normal(best.shape), model, params, y) > c0


def test_costs_reject_wrong_shapes(ct_small):
    model, X, y, _ = ct_small
    with pytest.raises(ValueError):
        ieks_cost(X[:-1], model, y)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_model_output_raises(ct_small):
    model, X, y, _ = ct_small
    bad = X.copy()
    bad[3, 4] = np.inf
    with pytest.raises(FloatingPointError):
        ieks_cost(bad, model, y)
