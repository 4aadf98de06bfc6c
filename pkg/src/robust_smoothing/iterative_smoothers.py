"""Iterated smoothers: plain Gauss-Newton, Levenberg-Marquardt and line search.

Every variant alternates between linearizing the model around the current
trajectory (Taylor for the IEKS family, SLR for the IPLS family) and
smoothing the resulting affine model. The LM variants add a pseudo-measurement
of the current means and adapt its strength; the line-search variants move a
fraction of the way towards the smoothed proposal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional, Union

import numpy as np

from .affine_smoother import LMRegularization, affine_smooth, kf_predict, kf_update
from .cost_functions import CostFunction, IplsCostContext, linearized_cost, make_cost
from .linearization import Cubature, SigmaScheme, linearize_ssm, slr_linearize, taylor_linearize
from .state_space import AffineParams, Gaussian, MeasurementSequence, NonlinearSSM, TrajectoryEstimate

log = logging.getLogger(__name__)

FAMILIES = ("ieks", "ipls")
STRATEGIES = ("plain", "lm", "line_search")
_PREFIX = {"plain": "", "lm": "LM-", "line_search": "LS-"}
SMOOTHER_NAMES = tuple(_PREFIX[s] + f.upper() for s in STRATEGIES for f in FAMILIES)

_NUMERICAL_ERRORS = (np.linalg.LinAlgError, FloatingPointError, ValueError)


class IterationFailure(RuntimeError):
    """Raised when an iteration cannot produce an acceptable estimate.

    ``estimate`` carries the last trajectory reached before the failure.
    """

    def __init__(self, message: str, estimate: Optional[TrajectoryEstimate] = None):
        super().__init__(message)
        self.estimate = estimate


@dataclass(frozen=True)
class GridSearch:
    """Step lengths ``{1/n, 2/n, ..., 1}``; the one with the lowest cost wins."""

    n: int = 10

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("grid size must be at least 1")

    @property
    def candidates(self) -> np.ndarray:
        return np.arange(1, self.n + 1) / self.n


@dataclass(frozen=True)
class Armijo:
    """Backtracking from ``alpha = 1`` until sufficient decrease."""

    c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 20

    def __post_init__(self):
        if not 0 < self.c1 < 1 or not 0 < self.shrink < 1 or self.max_backtracks < 0:
            raise ValueError("Armijo needs 0 < c1 < 1, 0 < shrink < 1 and max_backtracks >= 0")


LineSearch = Union[GridSearch, Armijo]


@dataclass(frozen=True)
class SmootherConfig:
    """Controls for one smoother variant.

    Parameters
    ----------
    family : {"ieks", "ipls"}
        Taylor or SLR linearization.
    strategy : {"plain", "lm", "line_search"}
    scheme : sigma-point rule used by the IPLS family
    max_iter : int
        Outer iterations.
    tol : float
        Stop when ``max_k |dx_k| / (1 + |x_k|)`` falls below it.
    inner_iters : int
        LM inner iterations per covariance refresh.
    line_search : GridSearch or Armijo
    lam0, nu, lam_max : float
        Initial damping, its adaptation factor, and the cap beyond which an
        LM iteration is declared failed.
    S : (d, d) array, optional
        LM scaling matrix used at every step; identity when omitted.
    joseph : bool
        Joseph-form covariance update in the Kalman filter.
    """

    family: str = "ieks"
    strategy: str = "plain"
    scheme: SigmaScheme = Cubature()
    max_iter: int = 10
    tol: float = 1e-6
    inner_iters: int = 1
    line_search: LineSearch = GridSearch()
    lam0: float = 1e-2
    nu: float = 10.0
    lam_max: float = 1e10
    S: Optional[np.ndarray] = None
    joseph: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.max_iter < 1 or self.inner_iters < 1:
            raise ValueError("max_iter and inner_iters must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.lam0 < 0 or not self.nu > 1 or not self.lam_max > 0:
            raise ValueError("need lam0 >= 0, nu > 1 and lam_max > 0")

    @property
    def name(self) -> str:
        return _PREFIX[self.strategy] + self.family.upper()

    @property
    def mode(self) -> str:
        return "taylor" if self.family == "ieks" else "slr"

    @classmethod
    def from_name(cls, name: str, **kwargs) -> "SmootherConfig":
        """``SmootherConfig.from_name("LM-IPLS", max_iter=20)``."""
        key = name.upper().replace("_", "-")
        for strategy, prefix in _PREFIX.items():
            for family in FAMILIES:
                if key == prefix + family.upper():
                    return cls(family=family, strategy=strategy, **kwargs)
        raise ValueError(f"unknown smoother {name!r}; choose from {SMOOTHER_NAMES}")


@dataclass(frozen=True)
class LMState:
    """Damping ``lam``, factor ``nu``, per-step scalings ``S`` and cap ``lam_max``."""

    lam: float
    nu: float
    S: np.ndarray
    lam_max: float = 1e10

    def __post_init__(self):
        if self.lam < 0 or not self.nu > 1:
            raise ValueError("need lam >= 0 and nu > 1")
        S = np.asarray(self.S, dtype=float)
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise ValueError("every S_k must be symmetric positive definite") from exc
        object.__setattr__(self, "S", S)


@dataclass(frozen=True)
class LineSearchResult:
    alpha: float
    means: np.ndarray
    covs: np.ndarray
    cost: float


@dataclass(frozen=True)
class IterationRecord:
    """One outer iteration.

    ``entry_cost`` and ``cost`` are the frozen objective of this iteration
    evaluated before and after the update; the IEKS objective never changes
    between iterations, the IPLS one does.
    """

    iteration: int
    estimate: TrajectoryEstimate
    cost: float
    entry_cost: float
    mean_change: float
    lam: Optional[float] = None
    alpha: Optional[float] = None
    accepted: int = 0
    rejected: int = 0


@dataclass
class IterationTrace:
    """Everything a driver produced, in order.

    ``failure`` holds the message of an error that ended the run early;
    ``stalled`` marks a run that stopped because no tried step decreased
    the cost.
    """

    smoother: str
    initial: TrajectoryEstimate
    records: list = field(default_factory=list)
    converged: bool = False
    stalled: bool = False
    failure: Optional[str] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def costs(self) -> np.ndarray:
        return np.array([r.cost for r in self.records])

    @property
    def entry_costs(self) -> np.ndarray:
        return np.array([r.entry_cost for r in self.records])

    @property
    def lams(self) -> list:
        return [r.lam for r in self.records]

    @property
    def final(self) -> TrajectoryEstimate:
        return self.records[-1].estimate if self.records else self.initial

    def estimates(self, n_iter: Optional[int] = None) -> list:
        """Initial estimate followed by one per iteration, padded with the last one."""
        out = [self.initial] + [r.estimate for r in self.records]
        if n_iter is not None:
            out = out[: n_iter + 1] + [out[-1]] * max(0, n_iter + 1 - len(out))
        return out


def relative_change(new: np.ndarray, old: np.ndarray) -> float:
    """``max_k |new_k - old_k| / (1 + |new_k|)``."""
    new = np.asarray(new, dtype=float)
    num = np.linalg.norm(new - old, axis=-1)
    return float(np.max(num / (1.0 + np.linalg.norm(new, axis=-1))))


def _safe_cost(cost: CostFunction, means) -> float:
    if not np.all(np.isfinite(means)):
        return np.inf
    try:
        c = cost(means)
    except _NUMERICAL_ERRORS:
        return np.inf
    return c if np.isfinite(c) else np.inf


def wrapped_measurements(model: NonlinearSSM, params: AffineParams, y: MeasurementSequence, means) -> MeasurementSequence:
    """Shift angle measurements by multiples of ``2 pi`` towards the linearized prediction.

    Identity unless ``model.wrap_angles``. The affine smoother forms raw
    innovations, so wrapping is applied once here around ``means``.
    """
    if not model.wrap_angles:
        return y
    out = []
    for k, yk in enumerate(y):
        if yk.size:
            yhat = params.H[k] @ means[k] + params.c[k]
            yk = yhat + model.meas_residual(yk, yhat)
        out.append(yk)
    return MeasurementSequence(out)


def _smooth(model, params, y, means, lm=None, joseph=False) -> TrajectoryEstimate:
    return affine_smooth(model, params, wrapped_measurements(model, params, y, means), lm, joseph)


def _linearize(model, traj, mode, scheme, error_covs=None) -> AffineParams:
    params = linearize_ssm(model, traj, mode, scheme)
    if error_covs is not None:
        params = params.with_error_covariances(*error_covs)
    return params


def gn_iteration(
    model: NonlinearSSM,
    traj: TrajectoryEstimate,
    y: MeasurementSequence,
    mode: str = "taylor",
    scheme: SigmaScheme = Cubature(),
    joseph: bool = False,
) -> TrajectoryEstimate:
    """Linearize around ``traj`` and smooth the affine model, with no safeguards."""
    params = linearize_ssm(model, traj, mode, scheme)
    return _smooth(model, params, y, traj.means, joseph=joseph)


class LMStep(NamedTuple):
    estimate: TrajectoryEstimate
    state: LMState
    cost: float
    entry_cost: float
    accepted: bool
    rejected: int


def lm_inner_iteration(
    model: NonlinearSSM,
    traj: TrajectoryEstimate,
    y: MeasurementSequence,
    lm: LMState,
    mode: str,
    cost: CostFunction,
    scheme: SigmaScheme = Cubature(),
    error_covs: Optional[tuple] = None,
    joseph: bool = False,
    tol: float = 0.0,
    params: Optional[AffineParams] = None,
) -> LMStep:
    """One damped step anchored at ``traj.means``.

    The model is linearized once around ``traj`` (with ``error_covs`` replacing
    the SLR error covariances when given). Proposals are smoothed with the
    pseudo-measurement ``traj.means`` of noise ``S / lam``; a proposal is
    accepted when it lowers ``cost``, dividing ``lam`` by ``nu``, otherwise
    ``lam`` is multiplied by ``nu`` and the step retried. A precomputed
    linearization around ``traj`` may be passed as ``params``.

    When ``tol > 0`` and a rejected proposal moves the means by less than
    ``tol`` (relative), the search stops without a step: ``accepted`` is False
    and ``estimate`` is ``traj``.

    Raises
    ------
    IterationFailure
        ``lam`` exceeded ``lm.lam_max``, or a step at ``lam == 0`` failed.
    """
    entry = cost(traj.means)
    if not np.isfinite(entry):
        raise IterationFailure("cost at the anchor is not finite", traj)
    if params is None:
        params = _linearize(model, traj, mode, scheme, error_covs)
    ys = wrapped_measurements(model, params, y, traj.means)
    lam = lm.lam
    rejected = 0
    while True:
        reg = LMRegularization(lam, lm.S, traj.means) if lam > 0 else None
        try:
            proposal = affine_smooth(model, params, ys, reg, joseph)
        except _NUMERICAL_ERRORS:
            proposal = None
        c = _safe_cost(cost, proposal.means) if proposal is not None else np.inf
        if c < entry:
            return LMStep(proposal, replace(lm, lam=lam / lm.nu), c, entry, True, rejected)
        if lam == 0:
            raise IterationFailure("undamped step did not decrease the cost", traj)
        if proposal is not None and np.isfinite(c) and relative_change(proposal.means, traj.means) < tol:
            return LMStep(traj, replace(lm, lam=lam), entry, entry, False, rejected)
        lam *= lm.nu
        rejected += 1
        if lam > lm.lam_max:
            raise IterationFailure(f"damping exceeded {lm.lam_max:g} without a cost decrease", traj)


def _lm_state(cfg: SmootherConfig, model: NonlinearSSM) -> LMState:
    d = model.state_dim
    S = np.eye(d) if cfg.S is None else np.asarray(cfg.S, dtype=float)
    return LMState(cfg.lam0, cfg.nu, np.broadcast_to(S, (model.horizon, d, d)), cfg.lam_max)


def _frozen_objective(model, y, traj, cfg) -> tuple:
    """``(cost, error_covs, params)`` of the outer iteration around ``traj``.

    ``params`` is the linearization around ``traj`` for the configured family.
    """
    params = linearize_ssm(model, traj, cfg.mode, cfg.scheme)
    if cfg.family == "ieks":
        return make_cost(model, y), None, params
    ctx = IplsCostContext.from_params(model, traj.covs, params, cfg.scheme)
    return make_cost(model, y, ctx), (params.Omega, params.Gamma), params


def _check_init(model: NonlinearSSM, init: TrajectoryEstimate) -> None:
    if len(init) != model.horizon or init.means.shape[-1] != model.state_dim:
        raise ValueError("initial estimate does not match the model")


def lm_smoother(
    model: NonlinearSSM,
    y: MeasurementSequence,
    init: TrajectoryEstimate,
    cfg: SmootherConfig,
) -> tuple[TrajectoryEstimate, IterationTrace]:
    """Levenberg-Marquardt regularized IEKS or IPLS.

    Each outer iteration freezes the objective (and, for IPLS, the SLR error
    covariances and the covariances the expectations are taken under), runs
    ``cfg.inner_iters`` damped steps that relinearize around the moving
    means, then takes the covariances of the last smoothed proposal.
    """
    if cfg.strategy != "lm":
        raise ValueError("lm_smoother needs an LM configuration")
    _check_init(model, init)
    trace = IterationTrace(cfg.name, init)
    state = _lm_state(cfg, model)
    traj = init
    for i in range(1, cfg.max_iter + 1):
        try:
            cost, error_covs, params = _frozen_objective(model, y, traj, cfg)
            means, covs = traj.means, traj.covs
            entry = None
            accepted = rejected = 0
            latest = traj
            for _ in range(cfg.inner_iters):
                step = lm_inner_iteration(
                    model, TrajectoryEstimate(means, covs), y, state, cfg.mode, cost,
                    cfg.scheme, error_covs, cfg.joseph, cfg.tol, params,
                )
                params = None
                entry = step.entry_cost if entry is None else entry
                state = step.state
                rejected += step.rejected
                if not step.accepted:
                    break
                accepted += 1
                latest = step.estimate
                means = latest.means
        except IterationFailure as exc:
            trace.failure = str(exc)
            log.debug("%s stopped at iteration %d: %s", cfg.name, i, exc)
            break
        except _NUMERICAL_ERRORS as exc:
            trace.failure = f"{type(exc).__name__}: {exc}"
            break
        new = TrajectoryEstimate(latest.means, latest.covs)
        change = relative_change(new.means, traj.means)
        trace.records.append(
            IterationRecord(i, new, step.cost if accepted else entry, entry, change, state.lam,
                            accepted=accepted, rejected=rejected)
        )
        traj = new
        if not accepted:
            trace.stalled = trace.converged = True
            break
        if change < cfg.tol:
            trace.converged = True
            break
    return trace.final, trace


def _try_alpha(cost, means, delta, alpha) -> float:
    return _safe_cost(cost, means + alpha * delta)


def grid_line_search(cost: CostFunction, means, delta, current: float, n: int = 10) -> tuple[float, float]:
    """Best of ``{1/n, ..., 1}`` along ``means + alpha * delta``, or ``alpha = 0``.

    Returns ``(alpha, cost)``. ``alpha = 0`` is returned only when every
    candidate is worse than ``current``.

    Raises
    ------
    IterationFailure
        Every candidate cost is non-finite.
    """
    alphas = GridSearch(n).candidates
    costs = np.array([_try_alpha(cost, means, delta, a) for a in alphas])
    if not np.any(np.isfinite(costs)):
        raise IterationFailure("cost is non-finite at every step length")
    j = int(np.argmin(costs))
    if costs[j] > current:
        return 0.0, current
    return float(alphas[j]), float(costs[j])


def armijo_line_search(
    cost: CostFunction, means, delta, current: float, slope: float, rule: Armijo = Armijo()
) -> tuple[float, float]:
    """Backtracking until ``cost(alpha) <= current + c1 * alpha * slope``.

    ``slope`` is the directional derivative along ``delta`` (negative for a
    descent direction). Falls back to ``alpha = 0`` if no step qualifies.
    """
    alpha = 1.0
    seen_finite = False
    for _ in range(rule.max_backtracks + 1):
        c = _try_alpha(cost, means, delta, alpha)
        seen_finite |= np.isfinite(c)
        if c <= current + rule.c1 * alpha * slope:
            return alpha, c
        alpha *= rule.shrink
    if not seen_finite:
        raise IterationFailure("cost is non-finite at every step length")
    return 0.0, current


def line_search_step(
    cost: CostFunction,
    traj: TrajectoryEstimate,
    proposal: TrajectoryEstimate,
    current: float,
    rule: LineSearch = GridSearch(),
    slope: Optional[float] = None,
) -> LineSearchResult:
    """Move from ``traj`` towards ``proposal`` by the step length ``rule`` picks.

    Covariances follow the same segment, ``P + alpha (P_s - P)``. ``slope``
    (directional derivative of ``cost`` at ``traj.means``) is needed by Armijo.
    """
    delta = proposal.means - traj.means
    if isinstance(rule, GridSearch):
        alpha, c = grid_line_search(cost, traj.means, delta, current, rule.n)
    else:
        if slope is None:
            raise ValueError("Armijo line search needs the directional derivative")
        alpha, c = armijo_line_search(cost, traj.means, delta, current, slope, rule)
    covs = traj.covs + alpha * (proposal.covs - traj.covs)
    return LineSearchResult(alpha, traj.means + alpha * delta, covs, c)


def line_search_smoother(
    model: NonlinearSSM,
    y: MeasurementSequence,
    init: TrajectoryEstimate,
    cfg: SmootherConfig,
) -> tuple[TrajectoryEstimate, IterationTrace]:
    """IEKS or IPLS with a step length chosen on the frozen objective.

    Means move to ``x + alpha (x_s - x)`` where ``x_s`` is the smoothed
    proposal; covariances are tracked the same way, ``P + alpha (P_s - P)``.
    """
    if cfg.strategy != "line_search":
        raise ValueError("line_search_smoother needs a line-search configuration")
    _check_init(model, init)
    trace = IterationTrace(cfg.name, init)
    traj = init
    for i in range(1, cfg.max_iter + 1):
        try:
            cost, _, params = _frozen_objective(model, y, traj, cfg)
            current = cost(traj.means)
            proposal = _smooth(model, params, y, traj.means, joseph=cfg.joseph)
            slope = None
            if isinstance(cfg.line_search, Armijo):
                ys = wrapped_measurements(model, params, y, traj.means)
                slope = -2.0 * (linearized_cost(traj.means, model, params, ys)
                                - linearized_cost(proposal.means, model, params, ys))
            step = line_search_step(cost, traj, proposal, current, cfg.line_search, slope)
        except IterationFailure as exc:
            trace.failure = str(exc)
            break
        except _NUMERICAL_ERRORS as exc:
            trace.failure = f"{type(exc).__name__}: {exc}"
            break
        alpha, c = step.alpha, step.cost
        new = proposal if alpha == 1.0 else TrajectoryEstimate(step.means, step.covs)
        change = relative_change(new.means, traj.means)
        trace.records.append(IterationRecord(i, new, c, current, change, alpha=alpha))
        traj = new
        if alpha == 0.0:
            trace.stalled = trace.converged = True
            break
        if change < cfg.tol:
            trace.converged = True
            break
    return trace.final, trace


def plain_smoother(
    model: NonlinearSSM,
    y: MeasurementSequence,
    init: TrajectoryEstimate,
    cfg: SmootherConfig,
) -> tuple[TrajectoryEstimate, IterationTrace]:
    """Undamped IEKS or IPLS: relinearize and smooth until convergence.

    The recorded cost is the objective frozen at the linearization point;
    it is informational only and may increase.
    """
    if cfg.strategy != "plain":
        raise ValueError("plain_smoother needs a plain configuration")
    _check_init(model, init)
    trace = IterationTrace(cfg.name, init)
    traj = init
    for i in range(1, cfg.max_iter + 1):
        try:
            cost, _, params = _frozen_objective(model, y, traj, cfg)
            entry = _safe_cost(cost, traj.means)
            new = _smooth(model, params, y, traj.means, joseph=cfg.joseph)
        except _NUMERICAL_ERRORS as exc:
            trace.failure = f"{type(exc).__name__}: {exc}"
            break
        if not new.is_finite:
            trace.failure = "non-finite estimate"
            trace.records.append(IterationRecord(i, new, np.inf, entry, np.inf))
            break
        change = relative_change(new.means, traj.means)
        trace.records.append(IterationRecord(i, new, _safe_cost(cost, new.means), entry, change))
        traj = new
        if change < cfg.tol:
            trace.converged = True
            break
    return trace.final, trace


_DRIVERS: dict[str, Callable] = {
    "plain": plain_smoother,
    "lm": lm_smoother,
    "line_search": line_search_smoother,
}


def _sequential_linearization(model, y, mode, scheme):
    if mode not in ("taylor", "slr"):
        raise ValueError(f"unknown linearization method {mode!r}")
    K, d = model.horizon, model.state_dim

    def lin(fn, jac, g: Gaussian):
        if mode == "taylor":
            return taylor_linearize(fn, jac, g.mean)
        return slr_linearize(fn, g, scheme)

    F, b, Om = np.empty((K - 1, d, d)), np.empty((K - 1, d)), np.empty((K - 1, d, d))
    H, c, Gam, ys = [], [], [], []
    belief = model.prior
    for k in range(K):
        if k > 0:
            F[k - 1], b[k - 1], Om[k - 1] = lin(
                lambda x, k=k - 1: model.motion(x, k), lambda x, k=k - 1: model.motion_jac(x, k), belief
            )
            belief = kf_predict(belief, F[k - 1], b[k - 1], model.motion_noise[k - 1] + Om[k - 1])
        yk = y[k]
        if model.meas_dim(k):
            Hk, ck, Gk = lin(lambda x, k=k: model.measurement(x, k), lambda x, k=k: model.meas_jac(x, k), belief)
            if model.wrap_angles:
                yhat = Hk @ belief.mean + ck
                yk = yhat + model.meas_residual(yk, yhat)
            belief = kf_update(belief, yk, Hk, ck, model.meas_noise[k] + Gk)
        else:
            Hk, ck, Gk = np.zeros((0, d)), np.zeros(0), np.zeros((0, 0))
        H.append(Hk)
        c.append(ck)
        Gam.append(Gk)
        ys.append(yk)
    return AffineParams(F, b, Om, tuple(H), tuple(c), tuple(Gam)), MeasurementSequence(ys)


def prior_linearization_params(
    model: NonlinearSSM,
    y: MeasurementSequence,
    mode: str = "taylor",
    scheme: SigmaScheme = Cubature(),
) -> AffineParams:
    """Affine model of the non-iterated smoother (EKS for Taylor, PrLS for SLR).

    Each measurement map is linearized around the predicted belief and each
    motion map around the filtered belief, as a sequential filter would.
    Smoothing the returned parameters reproduces that filter and its RTS pass.
    """
    return _sequential_linearization(model, y, mode, scheme)[0]


def initial_estimate(
    model: NonlinearSSM,
    y: MeasurementSequence,
    kind: str = "smoother",
    mode: str = "taylor",
    scheme: SigmaScheme = Cubature(),
) -> TrajectoryEstimate:
    """Starting trajectory for the iterations.

    ``kind="smoother"`` runs the non-iterated smoother of the family
    (``mode``); ``kind="prior"`` uses zero means and the prior covariance at
    every step.
    """
    if kind == "prior":
        return TrajectoryEstimate.constant(np.zeros(model.state_dim), model.prior.cov, model.horizon)
    if kind == "smoother":
        params, ys = _sequential_linearization(model, y, mode, scheme)
        return affine_smooth(model, params, ys)
    raise ValueError(f"unknown initialization {kind!r}; use 'smoother' or 'prior'")


def smooth(
    model: NonlinearSSM,
    y: MeasurementSequence,
    cfg: SmootherConfig,
    init: Optional[TrajectoryEstimate] = None,
) -> tuple[TrajectoryEstimate, IterationTrace]:
    """Run the variant selected by ``cfg``; ``init`` defaults to the family's non-iterated smoother."""
    y.check_conformable(model)
    if init is None:
        init = initial_estimate(model, y, "smoother", cfg.mode, cfg.scheme)
    return _DRIVERS[cfg.strategy](model, y, init, cfg)
