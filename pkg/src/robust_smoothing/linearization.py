"""Affine approximations of nonlinear maps.

Two families:

* first-order Taylor expansion around a point (IEKS), error covariance zero;
* statistical linear regression (SLR) under a Gaussian, with moments
  approximated by sigma points (IPLS).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .state_space import AffineParams, Gaussian, NonlinearSSM, TrajectoryEstimate, symmetrize_psd

SLR_MAX_CONDITION = 1e12
CHOLESKY_JITTER = 1e-12


@dataclass(frozen=True)
class SigmaPointSet:
    points: np.ndarray
    mean_weights: np.ndarray
    cov_weights: np.ndarray

    def __post_init__(self):
        n = self.points.shape[0]
        if self.mean_weights.shape != (n,) or self.cov_weights.shape != (n,):
            raise ValueError("one weight per point required")
        if abs(self.mean_weights.sum() - 1.0) > 1e-12:
            raise ValueError("mean weights must sum to one")


@dataclass(frozen=True)
class SLRMoments:
    zbar: np.ndarray
    Psi: np.ndarray
    Phi: np.ndarray


def _sqrt_cov(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, retrying once with a tiny jitter after PSD clipping."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    fixed = symmetrize_psd(cov) + CHOLESKY_JITTER * np.eye(cov.shape[0])
    return np.linalg.cholesky(fixed)


@dataclass(frozen=True)
class Cubature:
    """Third-degree spherical-radial rule: ``2d`` points, uniform weights."""

    name = "cubature"

    def unit_offsets(self, d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        xi = np.sqrt(d) * np.vstack([np.eye(d), -np.eye(d)])
        w = np.full(2 * d, 1.0 / (2 * d))
        return xi, w, w

    def __call__(self, g: Gaussian) -> SigmaPointSet:
        return cubature_points(g)


@dataclass(frozen=True)
class Unscented:
    """Symmetric ``2d+1`` point set. ``kappa=None`` means ``3 - d``."""

    kappa: Optional[float] = None
    name = "unscented"

    def _kappa(self, d: int) -> float:
        return 3.0 - d if self.kappa is None else float(self.kappa)

    def unit_offsets(self, d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        kappa = self._kappa(d)
        if d + kappa <= 0:
            raise ValueError(f"d + kappa must be positive (d={d}, kappa={kappa})")
        xi = np.sqrt(d + kappa) * np.vstack([np.zeros((1, d)), np.eye(d), -np.eye(d)])
        w = np.full(2 * d + 1, 1.0 / (2 * (d + kappa)))
        w[0] = kappa / (d + kappa)
        return xi, w, w.copy()

    def __call__(self, g: Gaussian) -> SigmaPointSet:
        return unscented_points(g, self._kappa(g.dim))


SigmaScheme = Union[Cubature, Unscented]


def _points_from_scheme(scheme: SigmaScheme, mean: np.ndarray, cov: np.ndarray) -> SigmaPointSet:
    xi, wm, wc = scheme.unit_offsets(mean.size)
    L = _sqrt_cov(cov)
    return SigmaPointSet(mean + xi @ L.T, wm, wc)


def unscented_points(g: Gaussian, kappa: float) -> SigmaPointSet:
    return _points_from_scheme(Unscented(kappa), g.mean, g.cov)


def cubature_points(g: Gaussian) -> SigmaPointSet:
    return _points_from_scheme(Cubature(), g.mean, g.cov)


def slr_moments(fn: Callable[[np.ndarray], np.ndarray], g: Gaussian, pts: SigmaPointSet) -> SLRMoments:
    """Sigma-point estimates of ``E[fn(x)]``, ``Cov[x, fn(x)]`` and ``Cov[fn(x)]``."""
    Z = np.asarray(fn(pts.points), dtype=float).reshape(pts.points.shape[0], -1)
    if not np.all(np.isfinite(Z)):
        raise FloatingPointError("non-finite map output at sigma points")
    zbar = pts.mean_weights @ Z
    dX = pts.points - g.mean
    dZ = Z - zbar
    Psi = (dX * pts.cov_weights[:, None]).T @ dZ
    Phi = (dZ * pts.cov_weights[:, None]).T @ dZ
    return SLRMoments(zbar, Psi, 0.5 * (Phi + Phi.T))


def taylor_linearize(fn: Callable[[np.ndarray], np.ndarray], jac: Callable[[np.ndarray], np.ndarray], xhat):
    """First-order expansion at ``xhat``: returns ``(F, b, 0)`` with ``F xhat + b = fn(xhat)``."""
    xhat = np.asarray(xhat, dtype=float)
    F = np.atleast_2d(np.asarray(jac(xhat), dtype=float))
    if not np.all(np.isfinite(F)):
        raise FloatingPointError("non-finite Jacobian")
    fx = np.atleast_1d(np.asarray(fn(xhat), dtype=float))
    b = fx - F @ xhat
    return F, b, np.zeros((fx.size, fx.size))


def _check_conditioning(cov: np.ndarray) -> None:
    if cov.shape[0] and np.linalg.cond(cov) > SLR_MAX_CONDITION:
        raise np.linalg.LinAlgError("covariance too ill-conditioned for statistical linear regression")


def slr_from_moments(m: SLRMoments, mean: np.ndarray, cov: np.ndarray):
    """Gain, offset and error covariance from SLR moments."""
    cf = cho_factor(cov, lower=True)
    F = cho_solve(cf, m.Psi).T
    b = m.zbar - F @ mean
    Omega = symmetrize_psd(m.Phi - F @ cov @ F.T)
    return F, b, Omega


def slr_linearize(fn: Callable[[np.ndarray], np.ndarray], g: Gaussian, scheme: SigmaScheme = Cubature()):
    """Statistical linear regression of ``fn`` with respect to ``g``.

    Returns ``(F, b, Omega)``: the affine map minimising the expected squared
    error under ``g`` and the covariance of the remaining error.
    """
    _check_conditioning(g.cov)
    pts = scheme(g)
    return slr_from_moments(slr_moments(fn, g, pts), g.mean, g.cov)


def sigma_offsets(covs: np.ndarray, scheme: SigmaScheme):
    """Sigma-point displacements for a stack of covariances ``(g, d, d)``.

    Returns ``(offsets (g, n, d), mean_weights, cov_weights)``; the points of
    step ``j`` are ``mean_j + offsets[j]``.
    """
    covs = np.asarray(covs, dtype=float)
    xi, wm, wc = scheme.unit_offsets(covs.shape[-1])
    try:
        L = np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        L = np.stack([_sqrt_cov(P) for P in covs])
    return np.einsum("nj,gij->gni", xi, L), wm, wc


def _taylor_batch(fn, jac, X: np.ndarray):
    F = np.asarray(jac(X), dtype=float)
    if not np.all(np.isfinite(F)):
        raise FloatingPointError("non-finite Jacobian")
    fx = np.asarray(fn(X), dtype=float).reshape(F.shape[:-1])
    b = fx - np.einsum("gij,gj->gi", F, X)
    return F, b, np.zeros(F.shape[:-1] + (F.shape[-2],))


def _slr_batch(fn, means: np.ndarray, covs: np.ndarray, scheme: SigmaScheme):
    if means.shape[-1] and np.any(np.linalg.cond(covs) > SLR_MAX_CONDITION):
        raise np.linalg.LinAlgError("covariance too ill-conditioned for statistical linear regression")
    offsets, wm, wc = sigma_offsets(covs, scheme)
    pts = means[:, None, :] + offsets
    Z = np.asarray(fn(pts), dtype=float)
    Z = Z.reshape(pts.shape[:2] + (-1,))
    if not np.all(np.isfinite(Z)):
        raise FloatingPointError("non-finite map output at sigma points")
    zbar = np.einsum("n,gno->go", wm, Z)
    dZ = Z - zbar[:, None, :]
    Psi = np.einsum("n,gni,gno->gio", wc, offsets, dZ)
    Phi = np.einsum("n,gno,gnp->gop", wc, dZ, dZ)
    # cov^{-1} Psi through the Cholesky factor: two triangular solves.
    L = np.linalg.cholesky(covs)
    F = np.swapaxes(np.linalg.solve(np.swapaxes(L, -1, -2), np.linalg.solve(L, Psi)), -1, -2)
    b = zbar - np.einsum("gij,gj->gi", F, means)
    Omega = symmetrize_psd(Phi - F @ covs @ np.swapaxes(F, -1, -2))
    return F, b, Omega


def linearize_ssm(
    model: NonlinearSSM,
    traj: TrajectoryEstimate,
    method: str = "taylor",
    scheme: SigmaScheme = Cubature(),
) -> AffineParams:
    """Affine approximation of every motion and measurement map.

    ``method="taylor"`` expands around ``traj.means`` only; ``method="slr"``
    regresses under ``N(traj.means[k], traj.covs[k])``. Steps sharing a map
    (see ``NonlinearSSM.motion_key``) are processed in one batch.
    """
    if method not in ("taylor", "slr"):
        raise ValueError(f"unknown linearization method {method!r}")
    K, d = model.horizon, model.state_dim
    if len(traj) != K:
        raise ValueError(f"trajectory length {len(traj)} != horizon {K}")
    means, covs = traj.means, traj.covs

    def block(fn, jac, ks):
        if method == "taylor":
            return _taylor_batch(fn, jac, means[ks])
        return _slr_batch(fn, means[ks], covs[ks], scheme)

    F = np.empty((K - 1, d, d))
    b = np.empty((K - 1, d))
    Om = np.zeros((K - 1, d, d))
    for rep, ks in model.motion_groups:
        F[ks], b[ks], Om[ks] = block(
            lambda x, k=rep: model.motion(x, k), lambda x, k=rep: model.motion_jac(x, k), ks
        )
    H = [np.zeros((model.meas_dim(k), d)) for k in range(K)]
    c = [np.zeros(model.meas_dim(k)) for k in range(K)]
    Gam = [np.zeros((model.meas_dim(k),) * 2) for k in range(K)]
    for rep, ks in model.meas_groups:
        Hg, cg, Gg = block(
            lambda x, k=rep: model.measurement(x, k), lambda x, k=rep: model.meas_jac(x, k), ks
        )
        for j, k in enumerate(ks):
            H[k], c[k], Gam[k] = Hg[j], cg[j], Gg[j]
    return AffineParams(F, b, Om, tuple(H), tuple(c), tuple(Gam))
