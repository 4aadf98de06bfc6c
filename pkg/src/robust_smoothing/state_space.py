"""Core value types: Gaussians, state-space models, affine parameters, trajectories.

Timesteps are indexed from 0 in code. A model with horizon ``K`` has states
``x_0 .. x_{K-1}``, motion maps ``f_0 .. f_{K-2}`` (``x_{k+1} = f_k(x_k) + q_k``)
and measurement maps ``h_0 .. h_{K-1}``.

Maps are called as ``fn(x, k)`` and must broadcast over leading axes of ``x``,
i.e. accept an array of shape ``(..., d_x)`` and return ``(..., d_out)``.
Sigma-point code relies on this to evaluate all points in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Hashable, Optional, Sequence

import numpy as np

Map = Callable[[np.ndarray, int], np.ndarray]

PSD_TOLERANCE = 1e-10


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _symmetric(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {M.shape}")
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _is_pd(S: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return False
    return True


def _project_psd(S: np.ndarray, what: Optional[str] = None) -> np.ndarray:
    # Cholesky is a cheap certificate for the common positive-definite case.
    if S.shape[-1] == 0 or (np.all(np.isfinite(S)) and _is_pd(S)):
        return S
    if what is not None and not np.all(np.isfinite(S)):
        raise ValueError(f"{what} has non-finite entries")
    w, V = np.linalg.eigh(S)
    if what is not None:
        scale = np.maximum(1.0, np.abs(w).max(axis=-1))
        if np.any(w.min(axis=-1) < -PSD_TOLERANCE * scale):
            raise ValueError(f"{what} is not positive semi-definite (min eigenvalue {w.min():.3e})")
    bad = w.min(axis=-1) < 0.0
    if not np.any(bad):
        return S
    w = np.clip(w, 0.0, None)
    clipped = (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)
    clipped = 0.5 * (clipped + np.swapaxes(clipped, -1, -2))
    if S.ndim == 2:
        return clipped
    out = S.copy()
    out[bad] = clipped[bad]
    return out


def symmetrize_psd(M) -> np.ndarray:
    """Symmetrize ``M`` and clip negative eigenvalues to zero.

    Works on a single square matrix or a stack of shape ``(..., d, d)``.
    Matrices that are already PSD after symmetrization come back as
    ``(M + M.T) / 2`` without an eigen-reconstruction round trip.
    """
    return _project_psd(_symmetric(M))


@dataclass(frozen=True)
class Gaussian:
    """Mean vector and covariance matrix of a normal belief."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean of size {mean.size}")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov", _frozen(_project_psd(_symmetric(cov), "covariance")))

    @property
    def dim(self) -> int:
        return self.mean.size


def finite_difference_jacobian(fn: Callable[[np.ndarray], np.ndarray], x) -> np.ndarray:
    """Central differences with per-coordinate step ``sqrt(eps) * (1 + |x_j|)``.

    ``x`` may be a stack ``(..., d)``; ``fn`` must broadcast over leading axes.
    Returns ``(..., d_out, d)``.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    steps = np.sqrt(np.finfo(float).eps) * (1.0 + np.abs(x))
    # All 2d perturbed points in one call: (..., 2d, d).
    delta = steps[..., None, :] * np.eye(d)
    pts = np.concatenate([x[..., None, :] + delta, x[..., None, :] - delta], axis=-2)
    vals = np.asarray(fn(pts), dtype=float)
    J = np.swapaxes(vals[..., :d, :] - vals[..., d:, :], -1, -2) / (2.0 * steps[..., None, :])
    if not np.all(np.isfinite(J)):
        raise FloatingPointError("non-finite Jacobian")
    return J


def _as_stack(mats, n: int, d: int, what: str) -> np.ndarray:
    a = np.asarray(mats, dtype=float)
    if a.ndim == 2:
        a = np.broadcast_to(a, (n, d, d))
    if a.shape != (n, d, d):
        raise ValueError(f"{what}: expected shape ({n}, {d}, {d}), got {a.shape}")
    return np.array(a)


def _inverse_cholesky(M: np.ndarray, what: str) -> np.ndarray:
    """``inv(chol(M))`` for a matrix or stack; raises if ``M`` is not positive definite."""
    if M.shape[-1] == 0:
        return M.copy()
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{what} is not positive definite") from exc
    return np.linalg.inv(L)


def _group_steps(steps, key: Optional[Callable[[int], Hashable]]) -> tuple:
    """Partition ``steps`` into runs that share one map, keyed by ``key(k)``."""
    if key is None:
        return tuple((k, np.array([k])) for k in steps)
    groups: dict = {}
    for k in steps:
        groups.setdefault(key(k), []).append(k)
    return tuple((ks[0], np.array(ks)) for ks in groups.values())


@dataclass(frozen=True, eq=False)
class NonlinearSSM:
    """Additive-noise state-space model with a Gaussian prior on the first state.

    Parameters
    ----------
    motion, measurement
        Maps ``f(x, k)`` and ``h(x, k)``; see module docstring for the
        broadcasting contract.
    motion_noise
        ``(K-1, d_x, d_x)`` stack, or a single matrix used for every step.
    meas_noise
        Sequence of ``K`` matrices; ``meas_noise[k]`` fixes ``d_y(k)``.
        A ``(0, 0)`` matrix marks a timestep without a measurement.
    prior
        Belief over the first state.
    motion_jacobian, meas_jacobian
        Optional analytic Jacobians ``J(x, k)`` returning ``(..., d_out, d_x)``
        for ``x`` of shape ``(..., d_x)``. Central finite differences are used
        when absent.
    motion_key, meas_key
        Optional ``k -> hashable``. Steps with equal keys must use the same
        map, which lets linearization and cost code evaluate them in one
        batched call. ``None`` treats every step as distinct.
    wrap_angles
        Wrap measurement residuals to ``(-pi, pi]``.
    """

    motion: Map
    measurement: Map
    motion_noise: np.ndarray
    meas_noise: Sequence[np.ndarray]
    prior: Gaussian
    motion_jacobian: Optional[Map] = None
    meas_jacobian: Optional[Map] = None
    motion_key: Optional[Callable[[int], Hashable]] = None
    meas_key: Optional[Callable[[int], Hashable]] = None
    wrap_angles: bool = False
    motion_groups: tuple = field(init=False, repr=False)
    meas_groups: tuple = field(init=False, repr=False)
    q_inv_chol: np.ndarray = field(init=False, repr=False)
    r_inv_chol: tuple = field(init=False, repr=False)

    def __post_init__(self):
        K = len(self.meas_noise)
        if K < 1:
            raise ValueError("horizon must be at least 1")
        d = self.prior.dim
        Q = _frozen(_as_stack(self.motion_noise, K - 1, d, "motion_noise"))
        R = tuple(_frozen(np.atleast_2d(r) if np.size(r) else np.zeros((0, 0))) for r in self.meas_noise)
        for k, r in enumerate(R):
            if r.ndim != 2 or r.shape[0] != r.shape[1]:
                raise ValueError(f"meas_noise[{k}] must be square")
        set_ = object.__setattr__
        set_(self, "motion_noise", Q)
        set_(self, "meas_noise", R)
        set_(self, "q_inv_chol", _frozen(_inverse_cholesky(Q, "motion_noise")) if K > 1 else Q)
        set_(self, "r_inv_chol", tuple(_frozen(_inverse_cholesky(r, f"meas_noise[{k}]")) for k, r in enumerate(R)))
        set_(self, "motion_groups", _group_steps(range(K - 1), self.motion_key))
        meas_key = self.meas_key
        dims_key = (lambda k: (R[k].shape[0], meas_key(k))) if meas_key is not None else None
        set_(self, "meas_groups", _group_steps([k for k in range(K) if R[k].shape[0]], dims_key))

    @property
    def horizon(self) -> int:
        return len(self.meas_noise)

    @property
    def state_dim(self) -> int:
        return self.prior.dim

    def meas_dim(self, k: int) -> int:
        return self.meas_noise[k].shape[0]

    @property
    def meas_dims(self) -> tuple[int, ...]:
        return tuple(r.shape[0] for r in self.meas_noise)

    def motion_jac(self, x, k: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.motion_jacobian is not None:
            J = np.asarray(self.motion_jacobian(x, k), dtype=float)
            return np.broadcast_to(J, x.shape[:-1] + (x.shape[-1], x.shape[-1]))
        return finite_difference_jacobian(lambda z: self.motion(z, k), x)

    def meas_jac(self, x, k: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        dy, d = self.meas_dim(k), self.state_dim
        if dy == 0:
            return np.zeros(x.shape[:-1] + (0, d))
        if self.meas_jacobian is not None:
            J = np.asarray(self.meas_jacobian(x, k), dtype=float)
            return np.broadcast_to(J.reshape(J.shape[:-2] + (dy, d)), x.shape[:-1] + (dy, d))
        return finite_difference_jacobian(lambda z: self.measurement(z, k), x)

    @cached_property
    def prior_inv_chol(self) -> np.ndarray:
        return _frozen(_inverse_cholesky(self.prior.cov, "prior covariance"))

    @cached_property
    def padded_r_inv_chol(self) -> np.ndarray:
        ri = self.r_inv_chol
        return _frozen(_pad_blocks(None, [np.zeros(r.shape[0]) for r in ri], ri, self.state_dim)[2])

    @cached_property
    def padded_meas_noise(self) -> np.ndarray:
        return _pad_blocks(None, [np.zeros(r.shape[0]) for r in self.meas_noise], self.meas_noise, self.state_dim)[2]

    def meas_residual(self, y, yhat) -> np.ndarray:
        """``y - yhat``, wrapped to ``(-pi, pi]`` when the model measures angles."""
        r = np.asarray(y, dtype=float) - np.asarray(yhat, dtype=float)
        if self.wrap_angles:
            r = np.pi - np.mod(np.pi - r, 2.0 * np.pi)
        return r

    @classmethod
    def affine(cls, F, b, Q, H, c, R, prior: Gaussian) -> "NonlinearSSM":
        """Linear-Gaussian model with per-step matrices (stacks or single matrices).

        ``F``/``b``/``Q`` describe the ``K-1`` transitions; ``H``/``c``/``R`` are
        sequences of length ``K``.
        """
        K = len(R)
        d = prior.dim
        F = np.broadcast_to(np.asarray(F, dtype=float), (K - 1, d, d)).copy()
        b = np.broadcast_to(np.asarray(b, dtype=float), (K - 1, d)).copy()
        H = [np.asarray(h, dtype=float).reshape(-1, d) for h in H]
        c = [np.atleast_1d(np.asarray(v, dtype=float)) for v in c]

        def motion(x, k):
            return x @ F[k].T + b[k]

        def measurement(x, k):
            return x @ H[k].T + c[k]

        return cls(
            motion=motion,
            measurement=measurement,
            motion_noise=Q,
            meas_noise=R,
            prior=prior,
            motion_jacobian=lambda x, k: F[k],
            meas_jacobian=lambda x, k: H[k],
        )


def _pad_blocks(H, c, G, d: int) -> tuple:
    K = len(c)
    ny = np.array([v.size for v in c], dtype=np.int64)
    p = int(ny.max()) if K else 0
    Hp, cp, Gp = np.zeros((K, p, d)), np.zeros((K, p)), np.zeros((K, p, p))
    for k in range(K):
        n = ny[k]
        if n:
            if H is not None:
                Hp[k, :n] = H[k]
            cp[k, :n] = c[k]
            if G is not None:
                Gp[k, :n, :n] = G[k]
    return Hp, cp, Gp, ny


@dataclass(frozen=True, eq=False)
class AffineParams:
    """Per-timestep affine approximation of a model.

    ``F``, ``b``, ``Omega`` hold the ``K-1`` transitions as stacks.
    ``H``, ``c``, ``Gamma`` are tuples of length ``K`` since ``d_y(k)`` varies.
    """

    F: np.ndarray
    b: np.ndarray
    Omega: np.ndarray
    H: tuple
    c: tuple
    Gamma: tuple

    def __post_init__(self):
        F = _frozen(self.F)
        n, d = F.shape[0], F.shape[-1] if F.ndim == 3 else 0
        if F.ndim != 3 or F.shape[1] != F.shape[2]:
            raise ValueError("F must be a (K-1, d, d) stack")
        b = _frozen(self.b).reshape(n, d)
        Om = _frozen(self.Omega).reshape(n, d, d)
        H = tuple(_frozen(h).reshape(-1, d) for h in self.H)
        c = tuple(_frozen(v).reshape(-1) for v in self.c)
        G = tuple(_frozen(g).reshape(v.size, v.size) for g, v in zip(self.Gamma, c))
        if not (len(H) == len(c) == len(G) == n + 1):
            raise ValueError("measurement parameters must have length K = len(F) + 1")
        for h, v in zip(H, c):
            if h.shape[0] != v.size:
                raise ValueError("H and c dimensions disagree")
        for name, val in (("F", F), ("b", b), ("Omega", Om)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "Gamma", G)

    @property
    def horizon(self) -> int:
        return len(self.H)

    @cached_property
    def padded(self) -> tuple:
        """``(H, c, Gamma, ny)`` with measurement blocks zero-padded to a common width."""
        return _pad_blocks(self.H, self.c, self.Gamma, self.F.shape[-1])

    def with_error_covariances(self, Omega, Gamma) -> "AffineParams":
        return AffineParams(self.F, self.b, Omega, self.H, self.c, Gamma)


@dataclass(frozen=True, eq=False)
class TrajectoryEstimate:
    """Means ``(K, d)`` and covariances ``(K, d, d)`` over the horizon."""

    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.covs, dtype=float)
        if means.ndim != 2 or covs.shape != (means.shape[0], means.shape[1], means.shape[1]):
            raise ValueError(f"inconsistent shapes: means {means.shape}, covs {covs.shape}")
        if np.all(np.isfinite(covs)):
            covs = _project_psd(_symmetric(covs), "trajectory covariance")
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "covs", _frozen(covs))

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, k: int) -> Gaussian:
        return Gaussian(self.means[k], self.covs[k])

    @property
    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.means)) and np.all(np.isfinite(self.covs)))

    @classmethod
    def constant(cls, mean, cov, K: int) -> "TrajectoryEstimate":
        """Same belief at every timestep (e.g. fixed-prior initialisation)."""
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        return cls(np.tile(mean, (K, 1)), np.tile(cov, (K, 1, 1)))


class MeasurementSequence(tuple):
    """Tuple of per-timestep measurement vectors (possibly empty)."""

    def __new__(cls, ys):
        return super().__new__(cls, (_frozen(np.atleast_1d(np.asarray(y, dtype=float)).reshape(-1)) for y in ys))

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(y.size for y in self)

    @cached_property
    def padded(self) -> np.ndarray:
        return _pad_blocks(None, self, None, 0)[1]

    def check_conformable(self, model: NonlinearSSM) -> None:
        if len(self) != model.horizon:
            raise ValueError(f"{len(self)} measurements for horizon {model.horizon}")
        if self.dims != model.meas_dims:
            raise ValueError("measurement dimensions do not match the model")
