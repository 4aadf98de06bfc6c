"""Nonlinear least-squares objectives minimised by the iterative smoothers.

``ieks_cost`` is the negative log posterior (up to a constant) of the model.
``ipls_cost`` replaces the maps by their sigma-point expectations under
frozen covariances and weights residuals by the noise plus SLR error
covariances of the current outer iteration. ``lm_cost`` adds the
Levenberg-Marquardt proximity term.

All quadratic forms ``r^T A^{-1} r`` are evaluated as ``|L^{-1} r|^2`` with
``A = L L^T``; the triangular inverses are computed once per model or context.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linearization import Cubature, SigmaScheme, linearize_ssm, sigma_offsets
from .state_space import (
    AffineParams,
    MeasurementSequence,
    NonlinearSSM,
    TrajectoryEstimate,
    _frozen,
    _inverse_cholesky,
    _pad_blocks,
    symmetrize_psd,
)

CostFunction = Callable[[np.ndarray], float]


def _check_means(means, model: NonlinearSSM) -> np.ndarray:
    X = np.asarray(means, dtype=float)
    if X.shape != (model.horizon, model.state_dim):
        raise ValueError(f"means must have shape {(model.horizon, model.state_dim)}, got {X.shape}")
    return X


def _finite(v: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"non-finite {what}")
    return v


def _sq(Linv: np.ndarray, r: np.ndarray) -> float:
    """Sum over the batch of ``|Linv_j r_j|^2``."""
    w = np.einsum("...ij,...j->...i", Linv, r)
    return float(np.sum(w * w))


def _prior_term(model: NonlinearSSM, x0: np.ndarray) -> float:
    return _sq(model.prior_inv_chol, x0 - model.prior.mean)


def _meas_targets(y: MeasurementSequence, ks: np.ndarray, dy: int) -> np.ndarray:
    return y.padded[ks, :dy]


def motion_residuals(means, model: NonlinearSSM) -> np.ndarray:
    """``x_{k+1} - f_k(x_k)`` for every transition, shape ``(K-1, d)``."""
    X = _check_means(means, model)
    out = np.empty((model.horizon - 1, model.state_dim))
    for rep, ks in model.motion_groups:
        out[ks] = X[ks + 1] - model.motion(X[ks], rep)
    return _finite(out, "motion model output")


def ieks_cost(means, model: NonlinearSSM, y: MeasurementSequence) -> float:
    """Negative log posterior of the model up to an additive constant.

    Parameters
    ----------
    means : (K, d) array
    model : NonlinearSSM
    y : MeasurementSequence

    Returns
    -------
    float
        ``0.5 * (prior + measurement + dynamics)`` squared Mahalanobis terms.
    """
    X = _check_means(means, model)
    total = _prior_term(model, X[0])
    if model.horizon > 1:
        total += _sq(model.q_inv_chol, motion_residuals(X, model))
    for rep, ks in model.meas_groups:
        dy = model.meas_dim(rep)
        yhat = _finite(np.asarray(model.measurement(X[ks], rep), dtype=float).reshape(len(ks), dy),
                       "measurement model output")
        r = model.meas_residual(_meas_targets(y, ks, dy), yhat)
        total += _sq(model.padded_r_inv_chol[ks, :dy, :dy], r)
    return 0.5 * total


@dataclass(frozen=True, eq=False)
class IplsCostContext:
    """Frozen quantities of one IPLS outer iteration.

    Parameters
    ----------
    model : NonlinearSSM
    covs : (K, d, d) array
        Smoothed covariances the SLR expectations are taken under.
    Omega : (K-1, d, d) array
    Gamma : sequence of K matrices
        SLR error covariances of the motion and measurement maps.
    scheme : sigma-point rule
    """

    model: NonlinearSSM
    covs: np.ndarray
    Omega: np.ndarray
    Gamma: tuple
    scheme: SigmaScheme = Cubature()
    offsets: np.ndarray = field(init=False, repr=False)
    mean_weights: np.ndarray = field(init=False, repr=False)
    q_inv_chol: np.ndarray = field(init=False, repr=False)
    r_inv_chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        model = self.model
        K, d = model.horizon, model.state_dim
        covs = symmetrize_psd(np.asarray(self.covs, dtype=float).reshape(K, d, d))
        Omega = symmetrize_psd(np.asarray(self.Omega, dtype=float).reshape(K - 1, d, d))
        if len(self.Gamma) != K:
            raise ValueError("Gamma must have one block per timestep")
        Gamma = tuple(_frozen(symmetrize_psd(np.atleast_2d(g)) if np.size(g) else np.zeros((0, 0)))
                      for g in self.Gamma)
        if tuple(g.shape[0] for g in Gamma) != model.meas_dims:
            raise ValueError("Gamma blocks do not match the measurement dimensions")
        offsets, wm, _ = sigma_offsets(covs, self.scheme)
        Qe = model.motion_noise + Omega
        qi = _inverse_cholesky(Qe, "Q + Omega") if K > 1 else Qe
        ri = [_inverse_cholesky(r + g, f"R + Gamma at step {k}")
              for k, (r, g) in enumerate(zip(model.meas_noise, Gamma))]
        set_ = object.__setattr__
        set_(self, "covs", _frozen(covs))
        set_(self, "Omega", _frozen(Omega))
        set_(self, "Gamma", Gamma)
        set_(self, "offsets", _frozen(offsets))
        set_(self, "mean_weights", _frozen(wm))
        set_(self, "q_inv_chol", _frozen(qi))
        set_(self, "r_inv_chol", _frozen(_pad_blocks(None, [np.zeros(r.shape[0]) for r in ri], ri, d)[2]))

    @classmethod
    def from_params(cls, model: NonlinearSSM, covs, params: AffineParams,
                    scheme: SigmaScheme = Cubature()) -> "IplsCostContext":
        return cls(model, covs, params.Omega, params.Gamma, scheme)

    @classmethod
    def from_estimate(cls, model: NonlinearSSM, traj: TrajectoryEstimate,
                      scheme: SigmaScheme = Cubature()) -> "IplsCostContext":
        """SLR-linearize around ``traj`` and freeze its covariances."""
        params = linearize_ssm(model, traj, "slr", scheme)
        return cls.from_params(model, traj.covs, params, scheme)

    def expected_motion(self, means) -> np.ndarray:
        """Sigma-point ``E[f_k(x)]`` under ``N(means[k], covs[k])``, shape ``(K-1, d)``."""
        model = self.model
        X = _check_means(means, model)
        out = np.empty((model.horizon - 1, model.state_dim))
        for rep, ks in model.motion_groups:
            pts = X[ks][:, None, :] + self.offsets[ks]
            out[ks] = np.einsum("n,gno->go", self.mean_weights, np.asarray(model.motion(pts, rep), dtype=float))
        return _finite(out, "motion model output")

    def expected_measurement(self, means, rep: int, ks: np.ndarray) -> np.ndarray:
        """Sigma-point ``E[h_k(x)]`` for the steps ``ks`` that share the map of step ``rep``."""
        pts = np.asarray(means, dtype=float)[ks][:, None, :] + self.offsets[ks]
        Z = np.asarray(self.model.measurement(pts, rep), dtype=float).reshape(len(ks), pts.shape[1], -1)
        return _finite(np.einsum("n,gno->go", self.mean_weights, Z), "measurement model output")


def ipls_cost(means, model: NonlinearSSM, y: MeasurementSequence, ctx: IplsCostContext) -> float:
    """IPLS objective of the outer iteration frozen in ``ctx``.

    Same structure as :func:`ieks_cost`, with ``f_k``/``h_k`` replaced by their
    sigma-point expectations and weights ``(Q + Omega)^{-1}``, ``(R + Gamma)^{-1}``.
    """
    if ctx.model is not model:
        raise ValueError("context was built for a different model")
    X = _check_means(means, model)
    total = _prior_term(model, X[0])
    if model.horizon > 1:
        total += _sq(ctx.q_inv_chol, X[1:] - ctx.expected_motion(X))
    for rep, ks in model.meas_groups:
        dy = model.meas_dim(rep)
        r = model.meas_residual(_meas_targets(y, ks, dy), ctx.expected_measurement(X, rep, ks))
        total += _sq(ctx.r_inv_chol[ks, :dy, :dy], r)
    return 0.5 * total


def linearized_cost(
    means,
    model: NonlinearSSM,
    params: AffineParams,
    y: MeasurementSequence,
) -> float:
    """Quadratic objective of the affine model ``params``.

    Residuals use ``F x + b`` and ``H x + c`` with weights ``(Q + Omega)^{-1}`` and
    ``(R + Gamma)^{-1}``; its minimiser is the smoothed mean of ``params``.
    """
    X = _check_means(means, model)
    total = _prior_term(model, X[0])
    if model.horizon > 1:
        Qe = model.motion_noise + params.Omega
        r = X[1:] - np.einsum("kij,kj->ki", params.F, X[:-1]) - params.b
        total += _sq(_inverse_cholesky(Qe, "Q + Omega"), r)
    for k in range(model.horizon):
        if model.meas_dim(k):
            Re = model.meas_noise[k] + params.Gamma[k]
            r = model.meas_residual(y[k], params.H[k] @ X[k] + params.c[k])
            total += _sq(_inverse_cholesky(Re, "R + Gamma"), r)
    return 0.5 * total


def lm_cost(base: CostFunction, means, anchor, lam: float, S) -> float:
    """``base(means) + 0.5 * lam * sum_k (x_k - a_k)^T S_k^{-1} (x_k - a_k)``.

    ``S`` is a single ``(d, d)`` matrix or a ``(K, d, d)`` stack.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    value = base(means)
    if lam == 0:
        return value
    X = np.asarray(means, dtype=float)
    E = X - np.asarray(anchor, dtype=float).reshape(X.shape)
    Sinv = _inverse_cholesky(np.broadcast_to(np.asarray(S, dtype=float), X.shape + X.shape[-1:]), "S")
    return value + 0.5 * lam * _sq(Sinv, E)


def make_cost(model: NonlinearSSM, y: MeasurementSequence, ctx: Optional[IplsCostContext] = None) -> CostFunction:
    """``means -> cost``: the IEKS objective, or the IPLS one when ``ctx`` is given."""
    if ctx is None:
        return lambda means: ieks_cost(means, model, y)
    return lambda means: ipls_cost(means, model, y, ctx)
