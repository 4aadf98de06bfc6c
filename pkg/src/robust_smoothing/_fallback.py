"""Pure NumPy forward-filter / backward-RTS pass.

Same contract as ``_kernels.filter_smooth``; selected when the compiled
extension is unavailable or ``ROBUST_SMOOTHING_PURE=1``.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def chol_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``A X = B`` for SPD ``A``; one jitter retry of ``1e-9 * trace/d``."""
    try:
        return cho_solve(cho_factor(A, lower=True), B)
    except np.linalg.LinAlgError:
        pass
    d = A.shape[0]
    jitter = 1e-9 * np.trace(A) / d
    if not np.isfinite(jitter) or jitter <= 0:
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return cho_solve(cho_factor(A + jitter * np.eye(d), lower=True), B)


def predict(m, P, F, b, Qe):
    return F @ m + b, _sym(F @ P @ F.T + Qe)


def update(m, P, y, H, c, Re, joseph=False):
    S = H @ P @ H.T + Re
    PHt = P @ H.T
    K = chol_solve(S, PHt.T).T
    m = m + K @ (y - (H @ m + c))
    if joseph:
        A = np.eye(m.size) - K @ H
        P = A @ P @ A.T + K @ Re @ K.T
    else:
        P = P - K @ S @ K.T
    return m, _sym(P)


def pseudo_update(m, P, anchor, lam, S):
    Sigma = P + S / lam
    K = chol_solve(Sigma, P).T
    m = m + K @ (anchor - m)
    P = P - K @ Sigma @ K.T
    return m, _sym(P)


def rts_step(mf, Pf, mp_next, Pp_next, ms_next, Ps_next, F):
    G = chol_solve(Pp_next, F @ Pf).T
    ms = mf + G @ (ms_next - mp_next)
    Ps = Pf + G @ (Ps_next - Pp_next) @ G.T
    return ms, _sym(Ps)


def filter_smooth(m0, P0, F, b, Qe, H, c, Re, y, ny, lam, S, anchor, joseph):
    """Forward pass (predict, update, optional LM pseudo-update) then RTS.

    Measurement blocks are padded to a common width; ``ny[k]`` is the number
    of valid rows at step ``k``. Returns predicted, filtered and smoothed
    means/covariances as six arrays.
    """
    K, d = anchor.shape
    mp = np.empty((K, d))
    Pp = np.empty((K, d, d))
    mf = np.empty((K, d))
    Pf = np.empty((K, d, d))
    m, P = np.array(m0, dtype=float), _sym(np.array(P0, dtype=float))
    for k in range(K):
        if k > 0:
            m, P = predict(m, P, F[k - 1], b[k - 1], Qe[k - 1])
        mp[k], Pp[k] = m, P
        n = int(ny[k])
        if n:
            m, P = update(m, P, y[k, :n], H[k, :n], c[k, :n], Re[k, :n, :n], joseph)
        if lam > 0:
            m, P = pseudo_update(m, P, anchor[k], lam, S[k])
        mf[k], Pf[k] = m, P
    ms = mf.copy()
    Ps = Pf.copy()
    for k in range(K - 2, -1, -1):
        ms[k], Ps[k] = rts_step(mf[k], Pf[k], mp[k + 1], Pp[k + 1], ms[k + 1], Ps[k + 1], F[k])
    return mp, Pp, mf, Pf, ms, Ps
