# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled forward-filter / backward-RTS pass.

Mirrors ``_fallback.filter_smooth`` operation for operation. All small dense
linear algebra is done in plain C loops on row-major buffers; matrices are a
handful of rows wide, where BLAS call overhead would dominate.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, isfinite
from libc.string cimport memcpy

cnp.import_array()


cdef int _chol(double* A, int n) noexcept nogil:
    # In-place lower Cholesky of an n x n row-major matrix. Upper part left as-is.
    cdef int i, j, k
    cdef double s
    for j in range(n):
        s = A[j * n + j]
        for k in range(j):
            s -= A[j * n + k] * A[j * n + k]
        if not (s > 0.0) or not isfinite(s):
            return -1
        s = sqrt(s)
        A[j * n + j] = s
        for i in range(j + 1, n):
            for k in range(j):
                A[i * n + j] -= A[i * n + k] * A[j * n + k]
            A[i * n + j] /= s
    return 0


cdef int _chol_jitter(const double* A, double* L, int n) noexcept nogil:
    # Factor A into L; on failure retry once with 1e-9 * trace/n added to the diagonal.
    cdef int i
    cdef double tr = 0.0
    memcpy(L, A, n * n * sizeof(double))
    if _chol(L, n) == 0:
        return 0
    for i in range(n):
        tr += A[i * n + i]
    tr = 1e-9 * tr / n
    if not (tr > 0.0) or not isfinite(tr):
        return -1
    memcpy(L, A, n * n * sizeof(double))
    for i in range(n):
        L[i * n + i] += tr
    return _chol(L, n)


cdef void _chol_solve(const double* L, int n, double* B, int m) noexcept nogil:
    # Solve (L L^T) X = B in place; B is n x m row-major.
    cdef int i, j, k
    cdef double s
    for j in range(m):
        for i in range(n):
            s = B[i * m + j]
            for k in range(i):
                s -= L[i * n + k] * B[k * m + j]
            B[i * m + j] = s / L[i * n + i]
        for i in range(n - 1, -1, -1):
            s = B[i * m + j]
            for k in range(i + 1, n):
                s -= L[k * n + i] * B[k * m + j]
            B[i * m + j] = s / L[i * n + i]


cdef void _matmul(const double* A, const double* B, double* C, int n, int p, int m) noexcept nogil:
    # C (n x m) = A (n x p) @ B (p x m)
    cdef int i, j, k
    cdef double s
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(p):
                s += A[i * p + k] * B[k * m + j]
            C[i * m + j] = s


cdef void _matmul_bt(const double* A, const double* B, double* C, int n, int p, int m) noexcept nogil:
    # C (n x m) = A (n x p) @ B^T where B is (m x p)
    cdef int i, j, k
    cdef double s
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(p):
                s += A[i * p + k] * B[j * p + k]
            C[i * m + j] = s


cdef void _transpose(const double* A, double* At, int n, int m) noexcept nogil:
    cdef int i, j
    for i in range(n):
        for j in range(m):
            At[j * n + i] = A[i * m + j]


cdef void _symmetrize(double* A, int n) noexcept nogil:
    cdef int i, j
    cdef double s
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.5 * (A[i * n + j] + A[j * n + i])
            A[i * n + j] = s
            A[j * n + i] = s


cdef void _gather(const double* src, int ld, int n, int m, double* dst) noexcept nogil:
    # Copy the leading n x m block of a row-major matrix with row stride ld.
    cdef int i, j
    for i in range(n):
        for j in range(m):
            dst[i * m + j] = src[i * ld + j]


def filter_smooth(m0, P0, F, b, Qe, H, c, Re, y, ny, double lam, S, anchor, bint joseph):
    """See ``_fallback.filter_smooth``."""
    cdef const double[::1] m0_ = np.ascontiguousarray(m0, dtype=np.float64)
    cdef const double[:, ::1] P0_ = np.ascontiguousarray(P0, dtype=np.float64)
    cdef const double[:, :, ::1] F_ = np.ascontiguousarray(F, dtype=np.float64)
    cdef const double[:, ::1] b_ = np.ascontiguousarray(b, dtype=np.float64)
    cdef const double[:, :, ::1] Qe_ = np.ascontiguousarray(Qe, dtype=np.float64)
    cdef const double[:, :, ::1] H_ = np.ascontiguousarray(H, dtype=np.float64)
    cdef const double[:, ::1] c_ = np.ascontiguousarray(c, dtype=np.float64)
    cdef const double[:, :, ::1] Re_ = np.ascontiguousarray(Re, dtype=np.float64)
    cdef const double[:, ::1] y_ = np.ascontiguousarray(y, dtype=np.float64)
    cdef const cnp.int64_t[::1] ny_ = np.ascontiguousarray(ny, dtype=np.int64)
    cdef const double[:, :, ::1] S_ = np.ascontiguousarray(S, dtype=np.float64)
    cdef const double[:, ::1] an_ = np.ascontiguousarray(anchor, dtype=np.float64)

    cdef int K = an_.shape[0]
    cdef int d = an_.shape[1]
    cdef int pw = H_.shape[1] if H_.shape[0] > 0 else 0

    mp_a = np.empty((K, d)); Pp_a = np.empty((K, d, d))
    mf_a = np.empty((K, d)); Pf_a = np.empty((K, d, d))
    ms_a = np.empty((K, d)); Ps_a = np.empty((K, d, d))
    cdef double[:, ::1] mp = mp_a
    cdef double[:, :, ::1] Pp = Pp_a
    cdef double[:, ::1] mf = mf_a
    cdef double[:, :, ::1] Pf = Pf_a
    cdef double[:, ::1] ms = ms_a
    cdef double[:, :, ::1] Ps = Ps_a

    nmax = max(d, pw, 1)
    cdef double[::1] m = np.zeros(d)
    cdef double[::1] tmpv = np.zeros(nmax)
    cdef double[::1] v = np.zeros(nmax)
    cdef double[:, ::1] P = np.zeros((d, d))
    cdef double[::1] T1 = np.zeros(nmax * nmax)
    cdef double[::1] T2 = np.zeros(nmax * nmax)
    cdef double[::1] T3 = np.zeros(nmax * nmax)
    cdef double[::1] Hk = np.zeros(nmax * nmax)
    cdef double[::1] Sk = np.zeros(nmax * nmax)
    cdef double[::1] L = np.zeros(nmax * nmax)
    cdef double[::1] Kg = np.zeros(nmax * nmax)

    cdef int k, i, j, n, info = 0, fail_k = -1
    cdef double s, inv_lam = 1.0 / lam if lam > 0 else 0.0

    for i in range(d):
        m[i] = m0_[i]
        for j in range(d):
            P[i, j] = P0_[i, j]
    _symmetrize(&P[0, 0], d)

    with nogil:
        for k in range(K):
            if k > 0:
                # m <- F m + b ; P <- F P F^T + Qe
                _matmul(&F_[k - 1, 0, 0], &m[0], &tmpv[0], d, d, 1)
                for i in range(d):
                    m[i] = tmpv[i] + b_[k - 1, i]
                _matmul(&F_[k - 1, 0, 0], &P[0, 0], &T1[0], d, d, d)
                _matmul_bt(&T1[0], &F_[k - 1, 0, 0], &P[0, 0], d, d, d)
                for i in range(d):
                    for j in range(d):
                        P[i, j] += Qe_[k - 1, i, j]
                _symmetrize(&P[0, 0], d)
            for i in range(d):
                mp[k, i] = m[i]
                for j in range(d):
                    Pp[k, i, j] = P[i, j]

            n = ny_[k]
            if n > 0:
                _gather(&H_[k, 0, 0], d, n, d, &Hk[0])
                # T1 = P H^T (d x n); S = H T1 + Re
                _matmul_bt(&P[0, 0], &Hk[0], &T1[0], d, d, n)
                _matmul(&Hk[0], &T1[0], &Sk[0], n, d, n)
                for i in range(n):
                    for j in range(n):
                        Sk[i * n + j] += Re_[k, i, j]
                if _chol_jitter(&Sk[0], &L[0], n) != 0:
                    info = 1
                    fail_k = k
                    break
                # Kg^T = S^{-1} T1^T  (n x d)
                _transpose(&T1[0], &T2[0], d, n)
                _chol_solve(&L[0], n, &T2[0], d)
                _transpose(&T2[0], &Kg[0], n, d)
                # innovation
                _matmul(&Hk[0], &m[0], &tmpv[0], n, d, 1)
                for i in range(n):
                    v[i] = y_[k, i] - (tmpv[i] + c_[k, i])
                _matmul(&Kg[0], &v[0], &tmpv[0], d, n, 1)
                for i in range(d):
                    m[i] += tmpv[i]
                if joseph:
                    # A = I - K H ; P <- A P A^T + K Re K^T
                    _matmul(&Kg[0], &Hk[0], &T1[0], d, n, d)
                    for i in range(d):
                        for j in range(d):
                            T1[i * d + j] = (1.0 if i == j else 0.0) - T1[i * d + j]
                    _matmul(&T1[0], &P[0, 0], &T2[0], d, d, d)
                    _matmul_bt(&T2[0], &T1[0], &T3[0], d, d, d)
                    _gather(&Re_[k, 0, 0], Re_.shape[2], n, n, &Sk[0])
                    _matmul(&Kg[0], &Sk[0], &T1[0], d, n, n)
                    _matmul_bt(&T1[0], &Kg[0], &T2[0], d, n, d)
                    for i in range(d):
                        for j in range(d):
                            P[i, j] = T3[i * d + j] + T2[i * d + j]
                else:
                    # P <- P - K S K^T
                    _matmul(&Kg[0], &Sk[0], &T1[0], d, n, n)
                    _matmul_bt(&T1[0], &Kg[0], &T2[0], d, n, d)
                    for i in range(d):
                        for j in range(d):
                            P[i, j] -= T2[i * d + j]
                _symmetrize(&P[0, 0], d)

            if lam > 0:
                # Sigma = P + S/lam ; K = P Sigma^{-1}
                for i in range(d):
                    for j in range(d):
                        Sk[i * d + j] = P[i, j] + S_[k, i, j] * inv_lam
                if _chol_jitter(&Sk[0], &L[0], d) != 0:
                    info = 2
                    fail_k = k
                    break
                for i in range(d):
                    for j in range(d):
                        T2[i * d + j] = P[i, j]
                _chol_solve(&L[0], d, &T2[0], d)
                _transpose(&T2[0], &Kg[0], d, d)
                for i in range(d):
                    v[i] = an_[k, i] - m[i]
                _matmul(&Kg[0], &v[0], &tmpv[0], d, d, 1)
                for i in range(d):
                    m[i] += tmpv[i]
                _matmul(&Kg[0], &Sk[0], &T1[0], d, d, d)
                _matmul_bt(&T1[0], &Kg[0], &T2[0], d, d, d)
                for i in range(d):
                    for j in range(d):
                        P[i, j] -= T2[i * d + j]
                _symmetrize(&P[0, 0], d)

            for i in range(d):
                mf[k, i] = m[i]
                ms[k, i] = m[i]
                for j in range(d):
                    Pf[k, i, j] = P[i, j]
                    Ps[k, i, j] = P[i, j]

        if info == 0:
            for k in range(K - 2, -1, -1):
                # G^T = Pp[k+1]^{-1} (F Pf[k])
                if _chol_jitter(&Pp[k + 1, 0, 0], &L[0], d) != 0:
                    info = 3
                    fail_k = k
                    break
                _matmul(&F_[k, 0, 0], &Pf[k, 0, 0], &T2[0], d, d, d)
                _chol_solve(&L[0], d, &T2[0], d)
                _transpose(&T2[0], &Kg[0], d, d)
                for i in range(d):
                    v[i] = ms[k + 1, i] - mp[k + 1, i]
                _matmul(&Kg[0], &v[0], &tmpv[0], d, d, 1)
                for i in range(d):
                    ms[k, i] = mf[k, i] + tmpv[i]
                for i in range(d):
                    for j in range(d):
                        T3[i * d + j] = Ps[k + 1, i, j] - Pp[k + 1, i, j]
                _matmul(&Kg[0], &T3[0], &T1[0], d, d, d)
                _matmul_bt(&T1[0], &Kg[0], &T2[0], d, d, d)
                for i in range(d):
                    for j in range(d):
                        Ps[k, i, j] = Pf[k, i, j] + T2[i * d + j]
                _symmetrize(&Ps[k, 0, 0], d)

    if info == 1:
        raise np.linalg.LinAlgError(f"singular innovation covariance at step {fail_k}")
    if info == 2:
        raise np.linalg.LinAlgError(f"singular regularisation covariance at step {fail_k}")
    if info == 3:
        raise np.linalg.LinAlgError(f"singular predicted covariance at step {fail_k + 1}")
    return mp_a, Pp_a, mf_a, Pf_a, ms_a, Ps_a
