"""Closed-form smoothing of affine-Gaussian models.

The per-step operations (:func:`kf_predict`, :func:`kf_update`,
:func:`lm_pseudo_update`) are exposed on :class:`Gaussian` values. The full
forward/backward pass in :func:`affine_smooth` runs on packed arrays through
the compiled kernel when it is importable, else through the NumPy fallback;
see :data:`BACKEND`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _fallback
from .state_space import AffineParams, Gaussian, MeasurementSequence, NonlinearSSM, TrajectoryEstimate

if os.environ.get("ROBUST_SMOOTHING_PURE", "") == "1":
    _kernels = None
else:
    try:
        from . import _kernels
    except ImportError:  # pragma: no cover - depends on the build
        _kernels = None

BACKEND = "compiled" if _kernels is not None else "python"

_PASSES = {"python": _fallback.filter_smooth}
if _kernels is not None:
    _PASSES["compiled"] = _kernels.filter_smooth


def kf_predict(belief: Gaussian, F, b, Q_eff) -> Gaussian:
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if F.shape != (belief.dim, belief.dim):
        raise ValueError("F does not match the belief dimension")
    m, P = _fallback.predict(belief.mean, belief.cov, F, np.asarray(b, dtype=float), np.asarray(Q_eff, dtype=float))
    return Gaussian(m, P)


def kf_update(belief: Gaussian, y, H, c, R_eff, joseph: bool = False) -> Gaussian:
    """Kalman update with innovation ``y - (H m + c)`` and noise ``R_eff``."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    H = np.asarray(H, dtype=float).reshape(y.size, belief.dim)
    R_eff = np.atleast_2d(np.asarray(R_eff, dtype=float))
    m, P = _fallback.update(
        belief.mean, belief.cov, y, H, np.atleast_1d(np.asarray(c, dtype=float)), R_eff, joseph
    )
    return Gaussian(m, P)


def lm_pseudo_update(belief: Gaussian, anchor, lam: float, S) -> Gaussian:
    """Condition on the pseudo-measurement ``anchor = x + e``, ``e ~ N(0, S / lam)``."""
    if not lam > 0:
        raise ValueError("lam must be positive; skip the pseudo-update when lam == 0")
    m, P = _fallback.pseudo_update(
        belief.mean, belief.cov, np.asarray(anchor, dtype=float), float(lam), np.atleast_2d(S)
    )
    return Gaussian(m, P)


@dataclass(frozen=True, eq=False)
class FilterCache:
    """Predicted and filtered moments from a forward pass, all ``(K, ...)`` stacks."""

    pred_means: np.ndarray
    pred_covs: np.ndarray
    filt_means: np.ndarray
    filt_covs: np.ndarray

    def __len__(self) -> int:
        return self.filt_means.shape[0]


def rts_backward(cache: FilterCache, params: AffineParams) -> TrajectoryEstimate:
    K = len(cache)
    if params.horizon != K:
        raise ValueError("cache and params horizons differ")
    ms = cache.filt_means.copy()
    Ps = cache.filt_covs.copy()
    for k in range(K - 2, -1, -1):
        ms[k], Ps[k] = _fallback.rts_step(
            cache.filt_means[k], cache.filt_covs[k], cache.pred_means[k + 1], cache.pred_covs[k + 1],
            ms[k + 1], Ps[k + 1], params.F[k],
        )
    return TrajectoryEstimate(ms, Ps)


@dataclass(frozen=True)
class LMRegularization:
    """Pseudo-measurement ``anchor_k = x_k + e_k``, ``e_k ~ N(0, S_k / lam)``."""

    lam: float
    S: np.ndarray
    anchor: np.ndarray


def pack_inputs(model: NonlinearSSM, params: AffineParams, y: MeasurementSequence):
    """Dense padded arrays ``(H, c, R_eff, Y, ny, Q_eff)`` for the pass kernels."""
    K = model.horizon
    if params.horizon != K or len(y) != K:
        raise ValueError("model, params and measurements must share the horizon")
    H, c, Gam, ny = params.padded
    if tuple(ny) != model.meas_dims or y.dims != model.meas_dims:
        raise ValueError("measurement dimensions do not match the model")
    return H, c, model.padded_meas_noise + Gam, y.padded, ny, model.motion_noise + params.Omega


def forward_backward(
    model: NonlinearSSM,
    params: AffineParams,
    y: MeasurementSequence,
    lm: Optional[LMRegularization] = None,
    joseph: bool = False,
    backend: Optional[str] = None,
):
    """Run the full pass; returns ``(FilterCache, TrajectoryEstimate)``."""
    H, c, Re, Y, ny, Qe = pack_inputs(model, params, y)
    K, d = model.horizon, model.state_dim
    if lm is not None and lm.lam > 0:
        lam = float(lm.lam)
        S = np.broadcast_to(np.asarray(lm.S, dtype=float), (K, d, d))
        anchor = np.asarray(lm.anchor, dtype=float).reshape(K, d)
    else:
        lam, S, anchor = 0.0, np.zeros((K, d, d)), np.zeros((K, d))
    run = _PASSES[backend or BACKEND]
    mp, Pp, mf, Pf, ms, Ps = run(
        model.prior.mean, model.prior.cov, params.F, params.b, Qe, H, c, Re, Y, ny, lam, S, anchor, joseph
    )
    return FilterCache(mp, Pp, mf, Pf), TrajectoryEstimate(ms, Ps)


def affine_smooth(
    model: NonlinearSSM,
    params: AffineParams,
    y: MeasurementSequence,
    lm: Optional[LMRegularization] = None,
    joseph: bool = False,
) -> TrajectoryEstimate:
    """Kalman filter plus RTS smoother for the affine model ``params``.

    Noise covariances are ``Q_k + Omega_k`` and ``R_k + Gamma_k``. With ``lm``
    set and ``lm.lam > 0``, each filtered belief is additionally conditioned on
    the LM pseudo-measurement before the backward pass.
    """
    return forward_backward(model, params, y, lm, joseph)[1]
