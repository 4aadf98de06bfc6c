"""Coordinated-turn bearings-only tracking: models, simulation and metrics.

State layout is ``(p_x, p_y, v_x, v_y, omega)``. Timesteps are 0-based: the
"k = 50, 100, ..., 500" schedule of the time-varying scenario is stored as
indices 49, 99, ..., 499.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .state_space import Gaussian, MeasurementSequence, NonlinearSSM, TrajectoryEstimate

STATE_LABELS = ("px", "py", "vx", "vy", "omega")
POSITION = (0, 1)
SERIES_THRESHOLD = 1e-8
_JAC_SERIES_THRESHOLD = 1e-2

DEFAULT_T = 0.01
DEFAULT_QV = 1e-4
DEFAULT_QW = 1e-2
DEFAULT_PRIOR_MEAN = (0.1, 0.2, 1.0, 0.0, 0.0)
DEFAULT_PRIOR_VAR = (0.1, 0.1, 1.0, 1.0, 1.0)
DEFAULT_HORIZON = 500


def _turn_coefficients(omega: np.ndarray, T: float):
    """``sin(wT)/w`` and ``(1 - cos(wT))/w`` with their small-angle limits."""
    theta = omega * T
    small = np.abs(theta) < SERIES_THRESHOLD
    w = np.where(small, 1.0, omega)
    half = 0.5 * np.where(small, 1.0, theta)
    s = np.where(small, T * (1.0 - theta**2 / 6.0), np.sin(w * T) / w)
    # 1 - cos(a) = 2 sin(a/2)^2 avoids cancellation for small a
    c = np.where(small, 0.5 * T * theta * (1.0 - theta**2 / 12.0), 2.0 * np.sin(half) ** 2 / w)
    return s, c


def ct_motion(x, T: float = DEFAULT_T) -> np.ndarray:
    """Nearly-coordinated-turn step for states of shape ``(..., 5)``.

    Positions advance along the arc, the velocity rotates by ``omega * T`` and
    the turn rate is unchanged. Reduces to constant velocity at ``omega = 0``.
    """
    x = np.asarray(x, dtype=float)
    px, py, vx, vy, om = np.moveaxis(x, -1, 0)
    s, c = _turn_coefficients(om, T)
    cw, sw = np.cos(om * T), np.sin(om * T)
    return np.stack(
        [px + s * vx - c * vy, py + c * vx + s * vy, cw * vx - sw * vy, sw * vx + cw * vy, om], axis=-1
    )


def ct_jacobian(x, T: float = DEFAULT_T) -> np.ndarray:
    """Analytic Jacobian of :func:`ct_motion`, shape ``(..., 5, 5)``."""
    x = np.asarray(x, dtype=float)
    px, py, vx, vy, om = np.moveaxis(x, -1, 0)
    s, c = _turn_coefficients(om, T)
    theta = om * T
    cw, sw = np.cos(theta), np.sin(theta)
    small = np.abs(theta) < _JAC_SERIES_THRESHOLD
    t = np.where(small, 1.0, theta)
    t2 = theta**2
    # d/dtheta of sin(t)/t and (1 - cos t)/t, times T^2 for d/domega
    ds = T**2 * np.where(small, -theta / 3.0 + theta * t2 / 30.0 - theta * t2**2 / 840.0,
                         (t * np.cos(t) - np.sin(t)) / t**2)
    dc = T**2 * np.where(small, 0.5 - t2 / 8.0 + t2**2 / 144.0 - t2**3 / 5760.0,
                         (t * np.sin(t) - 2.0 * np.sin(0.5 * t) ** 2) / t**2)
    J = np.zeros(x.shape + (5,))
    J[..., 0, 0] = J[..., 1, 1] = J[..., 4, 4] = 1.0
    J[..., 0, 2], J[..., 0, 3], J[..., 0, 4] = s, -c, ds * vx - dc * vy
    J[..., 1, 2], J[..., 1, 3], J[..., 1, 4] = c, s, dc * vx + ds * vy
    J[..., 2, 2], J[..., 2, 3], J[..., 2, 4] = cw, -sw, -T * (sw * vx + cw * vy)
    J[..., 3, 2], J[..., 3, 3], J[..., 3, 4] = sw, cw, T * (cw * vx - sw * vy)
    return J


def ct_process_noise(T: float = DEFAULT_T, q_v: float = DEFAULT_QV, q_w: float = DEFAULT_QW) -> np.ndarray:
    """Discretized white-acceleration blocks per axis plus ``q_w * T`` for the turn rate."""
    if not T > 0 or q_v < 0 or q_w < 0:
        raise ValueError("need T > 0 and nonnegative noise intensities")
    Q = np.zeros((5, 5))
    for p, v in ((0, 2), (1, 3)):
        Q[p, p] = q_v * T**3 / 3.0
        Q[p, v] = Q[v, p] = q_v * T**2 / 2.0
        Q[v, v] = q_v * T
    Q[4, 4] = q_w * T
    return Q


@dataclass(frozen=True)
class CoordinatedTurnModel:
    """Sampling period and noise intensities of the CT dynamics."""

    T: float = DEFAULT_T
    q_v: float = DEFAULT_QV
    q_w: float = DEFAULT_QW

    def __post_init__(self):
        ct_process_noise(self.T, self.q_v, self.q_w)

    def motion(self, x, k: int = 0) -> np.ndarray:
        return ct_motion(x, self.T)

    def jacobian(self, x, k: int = 0) -> np.ndarray:
        return ct_jacobian(x, self.T)

    @property
    def Q(self) -> np.ndarray:
        return ct_process_noise(self.T, self.q_v, self.q_w)


def bearings(x, sensors) -> np.ndarray:
    """``atan2(p_y - s_y, p_x - s_x)`` for each sensor row, shape ``(..., n_sensors)``."""
    x = np.asarray(x, dtype=float)
    S = np.asarray(sensors, dtype=float).reshape(-1, 2)
    dx = x[..., None, 0] - S[:, 0]
    dy = x[..., None, 1] - S[:, 1]
    if np.any((dx == 0) & (dy == 0)):
        raise ValueError("target coincides with a sensor position")
    return np.arctan2(dy, dx)


def bearings_jacobian(x, sensors) -> np.ndarray:
    """Jacobian of :func:`bearings`; only the position columns are nonzero."""
    x = np.asarray(x, dtype=float)
    S = np.asarray(sensors, dtype=float).reshape(-1, 2)
    dx = x[..., None, 0] - S[:, 0]
    dy = x[..., None, 1] - S[:, 1]
    r2 = dx**2 + dy**2
    if np.any(r2 == 0):
        raise ValueError("target coincides with a sensor position")
    J = np.zeros(x.shape[:-1] + (S.shape[0], x.shape[-1]))
    J[..., 0] = -dy / r2
    J[..., 1] = dx / r2
    return J


@dataclass(frozen=True)
class BearingsSensorConfig:
    """Sensor positions, default noise stds and per-step overrides.

    Parameters
    ----------
    positions : (n, 2) array
    stds : (n,) array
        Bearing noise standard deviation per sensor [rad].
    schedule : mapping ``k -> (active sensor indices, stds)``
        Steps absent from the schedule use every sensor with ``stds``.
    """

    positions: np.ndarray = field(default_factory=lambda: np.array([[-1.5, 0.5], [1.0, 1.0]]))
    stds: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    schedule: Mapping[int, tuple] = field(default_factory=dict)

    def __post_init__(self):
        P = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        s = np.broadcast_to(np.asarray(self.stds, dtype=float), (P.shape[0],)).copy()
        if P.shape[0] < 1:
            raise ValueError("at least one sensor is required")
        if np.any(s <= 0):
            raise ValueError("sensor noise stds must be positive")
        sched = {}
        for k, (active, stds) in dict(self.schedule).items():
            active = tuple(int(i) for i in active)
            if any(i < 0 or i >= P.shape[0] for i in active):
                raise ValueError(f"schedule at step {k} names an unknown sensor")
            stds = np.broadcast_to(np.asarray(stds, dtype=float), (len(active),))
            if np.any(stds <= 0):
                raise ValueError(f"schedule at step {k} has a nonpositive std")
            sched[int(k)] = (active, tuple(float(v) for v in stds))
        object.__setattr__(self, "positions", P)
        object.__setattr__(self, "stds", s)
        object.__setattr__(self, "schedule", sched)

    def active(self, k: int) -> tuple:
        """``(sensor indices, stds)`` at step ``k``."""
        if k in self.schedule:
            return self.schedule[k]
        return tuple(range(self.positions.shape[0])), tuple(float(v) for v in self.stds)

    def noise_cov(self, k: int) -> np.ndarray:
        return np.diag(np.square(self.active(k)[1]))

    def measure(self, x, k: int) -> np.ndarray:
        return bearings(x, self.positions[list(self.active(k)[0])])

    def jacobian(self, x, k: int) -> np.ndarray:
        return bearings_jacobian(x, self.positions[list(self.active(k)[0])])

    @classmethod
    def two_sensors(cls, std: float = 0.5) -> "BearingsSensorConfig":
        """Sensors at ``(-1.5, 0.5)`` and ``(1, 1)`` with a common std."""
        return cls(np.array([[-1.5, 0.5], [1.0, 1.0]]), np.array([std, std]))

    @classmethod
    def time_varying(cls, horizon: int = DEFAULT_HORIZON, std: float = 0.5, every: int = 50,
                     precise_std: float = 0.025) -> "BearingsSensorConfig":
        """Two sensors, except that every ``every``-th step (1-based) only the
        sensor at ``(1, 1)`` reports, with std ``precise_std``."""
        base = cls.two_sensors(std)
        sched = {k - 1: ((1,), (precise_std,)) for k in range(every, horizon + 1, every)}
        return cls(base.positions, base.stds, sched)


def ct_bearings_model(
    sensors: Optional[BearingsSensorConfig] = None,
    horizon: int = DEFAULT_HORIZON,
    dynamics: CoordinatedTurnModel = CoordinatedTurnModel(),
    prior_mean: Sequence[float] = DEFAULT_PRIOR_MEAN,
    prior_var: Sequence[float] = DEFAULT_PRIOR_VAR,
    wrap_angles: bool = False,
) -> NonlinearSSM:
    """Coordinated-turn dynamics observed through bearings-only sensors."""
    sensors = BearingsSensorConfig.two_sensors() if sensors is None else sensors
    if horizon < 1:
        raise ValueError("horizon must be positive")
    prior = Gaussian(np.asarray(prior_mean, dtype=float), np.diag(np.asarray(prior_var, dtype=float)))
    return NonlinearSSM(
        motion=dynamics.motion,
        measurement=sensors.measure,
        motion_noise=dynamics.Q,
        meas_noise=[sensors.noise_cov(k) for k in range(horizon)],
        prior=prior,
        motion_jacobian=dynamics.jacobian,
        meas_jacobian=sensors.jacobian,
        motion_key=lambda k: 0,
        meas_key=lambda k: sensors.active(k)[0],
        wrap_angles=wrap_angles,
    )


def simulate(
    model: NonlinearSSM,
    seed: int,
    x1: Optional[np.ndarray] = None,
    noise: bool = True,
) -> tuple[np.ndarray, MeasurementSequence]:
    """Draw a state trajectory and its measurements.

    ``x1`` fixes the initial state instead of sampling the prior; ``noise=False``
    drops process and measurement noise. Noise is Cholesky-colored standard
    normal draws from ``numpy.random.default_rng(seed)``, taken in a fixed
    order (initial state, all process noise, then measurements step by step).
    """
    rng = np.random.default_rng(seed)
    K, d = model.horizon, model.state_dim
    z0 = rng.standard_normal(d)
    if x1 is None:
        x1 = model.prior.mean + np.linalg.cholesky(model.prior.cov) @ z0
    X = np.empty((K, d))
    X[0] = np.asarray(x1, dtype=float)
    Wq = rng.standard_normal((K - 1, d))
    if K > 1:
        Lq = np.linalg.cholesky(model.motion_noise)
        for k in range(K - 1):
            X[k + 1] = model.motion(X[k], k)
            if noise:
                X[k + 1] += Lq[k] @ Wq[k]
    ys = []
    for k in range(K):
        n = model.meas_dim(k)
        zr = rng.standard_normal(n)
        if n == 0:
            ys.append(np.zeros(0))
            continue
        yk = np.asarray(model.measurement(X[k], k), dtype=float).reshape(n)
        if noise:
            yk = yk + np.linalg.cholesky(model.meas_noise[k]) @ zr
        ys.append(yk)
    return X, MeasurementSequence(ys)


def rmse(est_means, true_states, components: Sequence[int] = POSITION) -> float:
    """Root mean over timesteps of the squared error norm on ``components``."""
    E = np.asarray(est_means, dtype=float)
    X = np.asarray(true_states, dtype=float)
    if E.shape != X.shape:
        raise ValueError(f"shape mismatch: {E.shape} vs {X.shape}")
    err = (E - X)[:, list(components)]
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def nees(est: TrajectoryEstimate, true_states, components: Optional[Sequence[int]] = None):
    """Normalized estimation error squared per timestep and its average.

    Returns ``(eps, mean)`` with ``eps[k] = e_k^T P_k^{-1} e_k``; ``components``
    restricts both the error and the covariance (full state by default).
    """
    X = np.asarray(true_states, dtype=float)
    if X.shape != est.means.shape:
        raise ValueError(f"shape mismatch: {est.means.shape} vs {X.shape}")
    idx = list(range(X.shape[1])) if components is None else list(components)
    e = (est.means - X)[:, idx]
    P = est.covs[:, idx][:, :, idx]
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise ValueError("estimate covariance is singular") from exc
    w = np.linalg.solve(L, e[..., None])[..., 0]
    eps = np.sum(w**2, axis=1)
    return eps, float(np.mean(eps))


def random_affine_model(
    rng: np.random.Generator,
    horizon: int = 50,
    state_dim: int = 4,
    meas_dim: int = 2,
    noise_scale: float = 0.1,
) -> NonlinearSSM:
    """Random stable linear-Gaussian model with time-varying matrices.

    Transition matrices are scaled to spectral radius below one; all noise
    covariances are well conditioned.
    """
    d, m, K = state_dim, meas_dim, horizon

    def spd(n):
        A = rng.standard_normal((n, n))
        return noise_scale * (A @ A.T / n + np.eye(n))

    F = rng.standard_normal((K - 1, d, d))
    F *= 0.95 / np.max(np.abs(np.linalg.eigvals(F)), axis=-1)[:, None, None]
    b = 0.1 * rng.standard_normal((K - 1, d))
    Q = np.stack([spd(d) for _ in range(K - 1)])
    H = rng.standard_normal((K, m, d))
    c = 0.1 * rng.standard_normal((K, m))
    R = [spd(m) for _ in range(K)]
    prior = Gaussian(rng.standard_normal(d), spd(d) * 10)
    return NonlinearSSM.affine(F, b, Q, list(H), list(c), R, prior)
