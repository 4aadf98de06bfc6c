import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust_smoothing.affine_smoother import affine_smooth
from robust_smoothing.cost_functions import IplsCostContext, ieks_cost, make_cost
from robust_smoothing.experiments import ct_bearings_model, simulate
from robust_smoothing.gn_oracle import build_ieks_problem, gn_step
from robust_smoothing.iterative_smoothers import (
    SMOOTHER_NAMES,
    Armijo,
    GridSearch,
    IterationFailure,
    LMState,
    SmootherConfig,
    armijo_line_search,
    gn_iteration,
    grid_line_search,
    initial_estimate,
    line_search_smoother,
    line_search_step,
    lm_inner_iteration,
    lm_smoother,
    plain_smoother,
    prior_linearization_params,
    relative_change,
    smooth,
)
from robust_smoothing.linearization import linearize_ssm
from robust_smoothing.state_space import Gaussian, MeasurementSequence, NonlinearSSM, TrajectoryEstimate


def _square_model():
    """Scalar state seen through ``x**2``: GN overshoots badly from near zero."""
    return NonlinearSSM(
        motion=lambda x, k: x, measurement=lambda x, k: x**2, motion_noise=np.zeros((0, 1, 1)),
        meas_noise=[0.1 * np.eye(1)], prior=Gaussian([0.0], [[100.0]]),
        motion_jacobian=lambda x, k: np.eye(1), meas_jacobian=lambda x, k: np.atleast_2d(2 * x),
    )


def _lm_state(lam, d=1, K=1):
    return LMState(lam, 10.0, np.broadcast_to(np.eye(d), (K, d, d)), 1e10)


def test_config_names_round_trip():
    for name in SMOOTHER_NAMES:
        assert SmootherConfig.from_name(name).name == name
    with pytest.raises(ValueError):
        SmootherConfig.from_name("TR-IEKS")
    with pytest.raises(ValueError):
        SmootherConfig(nu=1.0)


def test_relative_change():
    assert relative_change(np.zeros((3, 2)), np.zeros((3, 2))) == 0.0
    assert relative_change(np.array([[3.0, 4.0]]), np.array([[0.0, 0.0]])) == pytest.approx(5.0 / 6.0)


def test_gn_iteration_is_exact_on_linear_model(linear_case):
    model, X, y = linear_case
    start = TrajectoryEstimate(X + 5.0, np.broadcast_to(np.eye(4), X.shape + (4,)))
    a = gn_iteration(model, start, y, "taylor")
    ref = gn_step(build_ieks_problem(model, y), np.zeros_like(X))
    np.testing.assert_allclose(a.means, ref, atol=1e-9)
    b = gn_iteration(model, start, y, "slr")
    np.testing.assert_allclose(b.means, a.means, atol=1e-9)


def test_lm_zero_damping_is_plain_gn(ct_small):
    model, _, y, init = ct_small
    cost = make_cost(model, y)
    step = lm_inner_iteration(model, init, y, _lm_state(0.0, 5, 10), "taylor", cost)
    assert step.accepted and step.cost < step.entry_cost
    np.testing.assert_allclose(step.estimate.means, gn_iteration(model, init, y).means, atol=1e-14)


def test_lm_zero_damping_fails_without_decrease():
    m = _square_model()
    y = MeasurementSequence([np.array([4.0])])
    t = TrajectoryEstimate(np.array([[0.1]]), np.ones((1, 1, 1)))
    with pytest.raises(IterationFailure):
        lm_inner_iteration(m, t, y, _lm_state(0.0), "taylor", make_cost(m, y))


def test_lm_immediate_acceptance_divides_lambda(ct_small):
    model, _, y, init = ct_small
    step = lm_inner_iteration(model, init, y, _lm_state(0.01, 5, 10), "taylor", make_cost(model, y))
    assert step.accepted and step.rejected == 0
    assert step.state.lam == 0.01 / 10.0


def test_lm_rejects_overshoot_then_accepts():
    m = _square_model()
    y = MeasurementSequence([np.array([4.0])])
    t = TrajectoryEstimate(np.array([[0.1]]), np.ones((1, 1, 1)))
    step = lm_inner_iteration(m, t, y, _lm_state(0.01), "taylor", make_cost(m, y))
    assert step.rejected >= 1 and step.accepted
    assert step.state.lam == pytest.approx(0.01 * 10.0**step.rejected / 10.0, rel=1e-15)
    assert step.cost < step.entry_cost


def test_lm_lambda_cap_raises():
    m = _square_model()
    y = MeasurementSequence([np.array([4.0])])
    t = TrajectoryEstimate(np.array([[0.1]]), np.ones((1, 1, 1)))
    state = LMState(0.01, 10.0, np.eye(1)[None], 0.05)
    with pytest.raises(IterationFailure) as info:
        lm_inner_iteration(m, t, y, state, "taylor", make_cost(m, y))
    assert info.value.estimate is t


@pytest.mark.parametrize("name", ["LM-IEKS", "LM-IPLS"])
def test_lm_smoother_converges_on_linear_model(linear_case, name):
    model, X, y = linear_case
    rts = affine_smooth(model, linearize_ssm(model, TrajectoryEstimate(X, np.broadcast_to(np.eye(4), X.shape + (4,))),
                                             "taylor"), y)
    final, trace = smooth(model, y, SmootherConfig.from_name(name, max_iter=20))
    assert trace.converged and trace.failure is None
    np.testing.assert_allclose(final.means, rts.means, atol=1e-8)
    costs = trace.costs
    assert np.all(np.diff(costs) <= 1e-9 * abs(costs[0]))


@pytest.mark.parametrize("family", ["IEKS", "IPLS"])
def test_lm_accepted_costs_never_increase(family):
    model = ct_bearings_model(horizon=100)
    for seed in range(3):
        _, y = simulate(model, seed)
        _, trace = smooth(model, y, SmootherConfig.from_name("LM-" + family))
        for r in trace.records:
            if r.accepted:
                assert r.cost < r.entry_cost
        if family == "IEKS":
            assert np.all(np.diff(trace.costs) <= 0)


def test_lm_ieks_not_worse_than_plain_ieks():
    model = ct_bearings_model(horizon=50)
    _, y = simulate(model, 0)
    lm_final, _ = smooth(model, y, SmootherConfig.from_name("LM-IEKS"))
    plain_final, plain = smooth(model, y, SmootherConfig.from_name("IEKS"))
    c_plain = ieks_cost(plain_final.means, model, y) if plain_final.is_finite else np.inf
    plain_diverged = not np.isfinite(c_plain) or np.any(np.diff(plain.costs) > 0)
    assert ieks_cost(lm_final.means, model, y) <= c_plain * (1 + 1e-12) or plain_diverged


def test_grid_picks_nearest_point_of_interior_minimum():
    cost = lambda x: float((x[0, 0] - 0.42) ** 2)
    alpha, c = grid_line_search(cost, np.zeros((1, 1)), np.ones((1, 1)), cost(np.zeros((1, 1))), 10)
    assert alpha == pytest.approx(0.4)
    assert c == pytest.approx(0.02**2)


def test_grid_returns_zero_when_every_candidate_is_worse():
    cost = lambda x: float(x[0, 0] ** 2)
    alpha, c = grid_line_search(cost, np.zeros((1, 1)), np.ones((1, 1)), 0.0)
    assert (alpha, c) == (0.0, 0.0)


def test_grid_all_non_finite_raises():
    with pytest.raises(IterationFailure):
        grid_line_search(lambda x: np.nan, np.zeros((1, 1)), np.ones((1, 1)), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(0.1, 10), st.integers(1, 20))
def test_grid_choice_dominates_all_candidates(center, curvature, n):
    cost = lambda x: float(curvature * (x[0, 0] - center) ** 2 + np.sin(5 * x[0, 0]))
    x0, d = np.zeros((1, 1)), np.ones((1, 1))
    cur = cost(x0)
    alpha, c = grid_line_search(cost, x0, d, cur, n)
    cands = [cost(x0 + a * d) for a in GridSearch(n).candidates]
    assert c <= min(cands + [cur]) + 1e-12


def test_armijo_accepts_full_step_on_quadratic():
    cost = lambda x: float(np.sum(x**2))
    x0 = np.full((1, 2), 1.0)
    alpha, _ = armijo_line_search(cost, x0, -x0, cost(x0), slope=-2 * cost(x0))
    assert alpha == 1.0


def test_armijo_backtracks():
    cost = lambda x: float(np.sum(x**2))
    x0 = np.full((1, 1), 1.0)
    alpha, c = armijo_line_search(cost, x0, -4 * x0, 1.0, slope=-8.0)
    assert alpha == 0.25 and c == 0.0


def test_line_search_full_step_reproduces_proposal(ct_small):
    model, _, y, init = ct_small
    proposal = gn_iteration(model, init, y)
    cost = make_cost(model, y)
    res = line_search_step(cost, init, proposal, np.inf, GridSearch(1))
    assert res.alpha == 1.0
    np.testing.assert_allclose(res.means, proposal.means, rtol=0, atol=1e-12)
    np.testing.assert_allclose(res.covs, proposal.covs, rtol=0, atol=1e-12)


@pytest.mark.parametrize("rule", [GridSearch(), Armijo()], ids=["grid", "armijo"])
@pytest.mark.parametrize("family", ["IEKS", "IPLS"])
def test_line_search_on_linear_model_takes_full_step(linear_case, rule, family):
    model, X, y = linear_case
    cfg = SmootherConfig.from_name("LS-" + family, line_search=rule)
    final, trace = smooth(model, y, cfg, initial_estimate(model, y, "prior"))
    assert trace.records[0].alpha == 1.0
    assert trace.converged and len(trace) == 2
    np.testing.assert_allclose(final.means, trace.records[0].estimate.means, atol=1e-10)


def test_line_search_tracked_covariances_stay_psd():
    model = ct_bearings_model(horizon=60)
    _, y = simulate(model, 4)
    _, trace = smooth(model, y, SmootherConfig.from_name("LS-IPLS"))
    for r in trace.records:
        assert np.linalg.eigvalsh(r.estimate.covs).min() >= -1e-12


@pytest.mark.parametrize("family", ["IEKS", "IPLS"])
def test_plain_on_linear_model_converges_after_one_update(linear_case, family):
    model, X, y = linear_case
    _, trace = smooth(model, y, SmootherConfig.from_name(family), initial_estimate(model, y, "prior"))
    assert trace.converged and len(trace) == 2
    np.testing.assert_allclose(trace.records[1].estimate.means, trace.records[0].estimate.means, atol=1e-10)


def test_plain_ieks_iterates_follow_dense_gauss_newton(ct_small):
    model, _, y, init = ct_small
    _, trace = plain_smoother(model, y, init, SmootherConfig.from_name("IEKS", max_iter=5, tol=1e-300))
    prob = build_ieks_problem(model, y)
    x = init.means
    assert len(trace) == 5
    for r in trace.records:
        x = gn_step(prob, x)
        assert np.linalg.norm(r.estimate.means - x) <= 1e-7 * np.linalg.norm(x)


def test_ipls_first_iterate_from_prior_linearization(ct_small):
    model, _, y, _ = ct_small
    params = prior_linearization_params(model, y, "slr")
    start = affine_smooth(model, params, y)
    manual = affine_smooth(model, linearize_ssm(model, start, "slr"), y)
    _, trace = plain_smoother(model, y, start, SmootherConfig.from_name("IPLS", max_iter=1))
    np.testing.assert_allclose(trace.records[0].estimate.means, manual.means, atol=1e-12)
    np.testing.assert_allclose(initial_estimate(model, y, "smoother", "slr").means, start.means, atol=1e-12)


def test_prior_initialization(ct_small):
    model, _, y, _ = ct_small
    t = initial_estimate(model, y, "prior")
    np.testing.assert_array_equal(t.means, 0.0)
    np.testing.assert_array_equal(t.covs[-1], model.prior.cov)
    with pytest.raises(ValueError):
        initial_estimate(model, y, "oracle")


def test_driver_rejects_wrong_strategy(ct_small):
    model, _, y, init = ct_small
    with pytest.raises(ValueError):
        lm_smoother(model, y, init, SmootherConfig.from_name("IEKS"))
    with pytest.raises(ValueError):
        line_search_smoother(model, y, init, SmootherConfig.from_name("LM-IPLS"))


def test_trace_padding(ct_small):
    model, _, y, init = ct_small
    _, trace = smooth(model, y, SmootherConfig.from_name("IEKS", max_iter=10), init)
    ests = trace.estimates(10)
    assert len(ests) == 11 and ests[0] is init and ests[-1] is trace.final


def test_ipls_context_is_frozen_across_lm_inner_steps(ct_small):
    model, _, y, init = ct_small
    ctx = IplsCostContext.from_estimate(model, init)
    c0 = make_cost(model, y, ctx)(init.means)
    cfg = SmootherConfig.from_name("LM-IPLS", max_iter=1, inner_iters=3)
    _, trace = lm_smoother(model, y, init, cfg)
    assert trace.records[0].entry_cost == pytest.approx(c0, rel=1e-14)
    assert trace.records[0].cost < c0
