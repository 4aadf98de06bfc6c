"""Dense Gauss-Newton / Levenberg-Marquardt reference solver.

Stacks the whole trajectory into one least-squares problem
``min_x 0.5 |rho(x)|^2`` and solves each linearized subproblem with a dense
QR factorization. Its cost is cubic in ``K * d_x``, so it is meant for tests
on small horizons only. Sigma points and SLR gains are recomputed here from
scratch rather than borrowed from the smoothing code, so that agreement
between the two is evidence rather than tautology.

Row layout of ``rho``: the prior block, the ``K-1`` dynamics blocks, then
one block per timestep that carries a measurement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_triangular

from .cost_functions import IplsCostContext
from .state_space import MeasurementSequence, NonlinearSSM

MAX_UNKNOWNS = 2500


def _chol_lower(A: np.ndarray) -> np.ndarray:
    return np.linalg.cholesky(np.asarray(A, dtype=float))


def _whiten(L: np.ndarray, r: np.ndarray) -> np.ndarray:
    """``L^{-1} r`` (also for a matrix ``r``)."""
    return solve_triangular(L, r, lower=True)


@dataclass(frozen=True, eq=False)
class StackedResidualProblem:
    """Whitened stacked residual and its Jacobian.

    Attributes
    ----------
    raw_residual : x -> r(x)
        Unweighted residual blocks stacked into one vector.
    raw_jacobian : x -> dr/dx
        Identity / ``-F_k`` block-bidiagonal over prior and dynamics rows,
        ``-H_k`` block-diagonal over measurement rows.
    roots : list of lower Cholesky factors, one per residual block
        ``rho = W^T r`` with ``W^T = blkdiag(L_j^{-1})``.
    """

    K: int
    d: int
    meas_dims: tuple
    raw_residual: Callable[[np.ndarray], np.ndarray]
    raw_jacobian: Callable[[np.ndarray], np.ndarray]
    roots: tuple

    @property
    def n_unknowns(self) -> int:
        return self.K * self.d

    @property
    def block_sizes(self) -> list:
        return [self.d] * self.K + [n for n in self.meas_dims if n]

    def weight_root(self) -> np.ndarray:
        """Dense ``W^T``."""
        sizes = self.block_sizes
        out = np.zeros((sum(sizes), sum(sizes)))
        i = 0
        for L, n in zip(self.roots, sizes):
            out[i:i + n, i:i + n] = _whiten(L, np.eye(n))
            i += n
        return out

    def _apply(self, r: np.ndarray) -> np.ndarray:
        out = np.empty_like(r)
        i = 0
        for L, n in zip(self.roots, self.block_sizes):
            out[i:i + n] = _whiten(L, r[i:i + n])
            i += n
        return out

    def residual(self, x) -> np.ndarray:
        return self._apply(self.raw_residual(self._flat(x)))

    def jacobian(self, x) -> np.ndarray:
        return self._apply(self.raw_jacobian(self._flat(x)))

    def cost(self, x) -> float:
        r = self.residual(x)
        return 0.5 * float(r @ r)

    def _flat(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != self.n_unknowns:
            raise ValueError(f"expected {self.n_unknowns} unknowns, got {x.size}")
        return x


def _check_size(model: NonlinearSSM) -> None:
    if model.horizon * model.state_dim > MAX_UNKNOWNS:
        raise ValueError(f"dense oracle limited to {MAX_UNKNOWNS} unknowns")


def _build(model: NonlinearSSM, y: MeasurementSequence, motion_pair, meas_pair, Qs, Rs) -> StackedResidualProblem:
    """Assemble a problem from per-step ``(value, jacobian)`` providers."""
    _check_size(model)
    y.check_conformable(model)
    K, d = model.horizon, model.state_dim
    dims = model.meas_dims
    meas_steps = [k for k in range(K) if dims[k]]
    n_rows = K * d + sum(dims)
    m0 = np.asarray(model.prior.mean, dtype=float)

    def raw_residual(x):
        X = x.reshape(K, d)
        parts = [X[0] - m0]
        for k in range(K - 1):
            parts.append(X[k + 1] - motion_pair(X[k], k)[0])
        for k in meas_steps:
            parts.append(model.meas_residual(y[k], meas_pair(X[k], k)[0]))
        return np.concatenate(parts)

    def raw_jacobian(x):
        X = x.reshape(K, d)
        J = np.zeros((n_rows, K * d))
        J[:d, :d] = np.eye(d)
        for k in range(K - 1):
            rows = slice((k + 1) * d, (k + 2) * d)
            J[rows, (k + 1) * d:(k + 2) * d] = np.eye(d)
            J[rows, k * d:(k + 1) * d] = -motion_pair(X[k], k)[1]
        i = K * d
        for k in meas_steps:
            n = dims[k]
            J[i:i + n, k * d:(k + 1) * d] = -meas_pair(X[k], k)[1]
            i += n
        return J

    roots = [_chol_lower(model.prior.cov)] + [_chol_lower(Q) for Q in Qs] + [_chol_lower(Rs[k]) for k in meas_steps]
    return StackedResidualProblem(K, d, dims, raw_residual, raw_jacobian, tuple(roots))


def build_ieks_problem(model: NonlinearSSM, y: MeasurementSequence) -> StackedResidualProblem:
    """Residuals of the model itself; Jacobian blocks are the map Jacobians."""

    def motion_pair(x, k):
        return np.asarray(model.motion(x, k), dtype=float), np.asarray(model.motion_jac(x, k), dtype=float)

    def meas_pair(x, k):
        n = model.meas_dim(k)
        return (np.asarray(model.measurement(x, k), dtype=float).reshape(n),
                np.asarray(model.meas_jac(x, k), dtype=float).reshape(n, -1))

    return _build(model, y, motion_pair, meas_pair, model.motion_noise, model.meas_noise)


def unit_sigma_points(d: int, scheme) -> tuple[np.ndarray, np.ndarray]:
    """``(xi, w)`` with ``xi`` of shape ``(n, d)`` for a unit Gaussian."""
    name = getattr(scheme, "name", None)
    if name == "cubature":
        xi = np.concatenate([np.eye(d), -np.eye(d)]) * np.sqrt(d)
        return xi, np.full(2 * d, 0.5 / d)
    if name == "unscented":
        kappa = 3.0 - d if scheme.kappa is None else float(scheme.kappa)
        xi = np.concatenate([np.zeros((1, d)), np.eye(d), -np.eye(d)]) * np.sqrt(d + kappa)
        w = np.concatenate([[kappa / (d + kappa)], np.full(2 * d, 0.5 / (d + kappa))])
        return xi, w
    raise ValueError(f"unsupported sigma-point scheme {scheme!r}")


def slr_expectation(fn, x, P, scheme) -> tuple[np.ndarray, np.ndarray]:
    """Sigma-point ``E[fn(z)]``, ``z ~ N(x, P)``, and the SLR gain ``Psi^T P^{-1}``.

    The gain is the analytic derivative of the expectation with respect to
    ``x`` when the expectation is exact; with sigma points it agrees to the
    order of the third derivative of ``fn`` times ``P``.
    """
    x = np.asarray(x, dtype=float)
    L = _chol_lower(P)
    xi, w = unit_sigma_points(x.size, scheme)
    dX = xi @ L.T
    Z = np.stack([np.atleast_1d(np.asarray(fn(x + dx), dtype=float)) for dx in dX])
    zbar = w @ Z
    Psi = (dX * w[:, None]).T @ (Z - zbar)
    gain = np.linalg.solve(P, Psi).T
    return zbar, gain


def build_ipls_problem(model: NonlinearSSM, y: MeasurementSequence, ctx: IplsCostContext) -> StackedResidualProblem:
    """Residuals against SLR expectations under the frozen covariances of ``ctx``.

    Weights are ``(Q + Omega)^{-1}`` and ``(R + Gamma)^{-1}``; Jacobian blocks are
    the SLR gains at the evaluation point.
    """
    covs = ctx.covs
    Qs = [model.motion_noise[k] + ctx.Omega[k] for k in range(model.horizon - 1)]
    Rs = [model.meas_noise[k] + ctx.Gamma[k] for k in range(model.horizon)]

    def motion_pair(x, k):
        return slr_expectation(lambda z: model.motion(z, k), x, covs[k], ctx.scheme)

    def meas_pair(x, k):
        return slr_expectation(lambda z: model.measurement(z, k), x, covs[k], ctx.scheme)

    return _build(model, y, motion_pair, meas_pair, Qs, Rs)


def _lstsq_qr(J: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """``argmin |J z - rhs|`` by reduced QR; raises on rank deficiency."""
    Qm, R = np.linalg.qr(J, mode="reduced")
    diag = np.abs(np.diag(R))
    if diag.size and diag.min() <= 1e-13 * max(diag.max(), 1.0):
        raise np.linalg.LinAlgError("stacked Jacobian is rank deficient")
    return solve_triangular(R, Qm.T @ rhs, lower=False)


def gn_step(problem: StackedResidualProblem, x) -> np.ndarray:
    """Minimizer of ``0.5 |rho(x) + J(x) (z - x)|^2``, returned with the shape of ``x``."""
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1)
    step = _lstsq_qr(problem.jacobian(flat), -problem.residual(flat))
    return (flat + step).reshape(x.shape)


def lm_step(problem: StackedResidualProblem, x, lam: float, S: Optional[np.ndarray] = None) -> np.ndarray:
    """GN step with the extra term ``0.5 lam (z - x)^T S^{-1} (z - x)``.

    Realized as extra rows ``sqrt(lam) L_S^{-1}`` with zero residual appended
    to the stacked system. ``S`` is ``(d, d)``, ``(K, d, d)`` or identity.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if lam == 0:
        return gn_step(problem, x)
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1)
    K, d = problem.K, problem.d
    S = np.eye(d) if S is None else np.asarray(S, dtype=float)
    S = np.broadcast_to(S, (K, d, d))
    extra = np.zeros((K * d, K * d))
    for k in range(K):
        extra[k * d:(k + 1) * d, k * d:(k + 1) * d] = np.sqrt(lam) * _whiten(_chol_lower(S[k]), np.eye(d))
    J = np.vstack([problem.jacobian(flat), extra])
    rhs = np.concatenate([-problem.residual(flat), np.zeros(K * d)])
    return (flat + _lstsq_qr(J, rhs)).reshape(x.shape)
