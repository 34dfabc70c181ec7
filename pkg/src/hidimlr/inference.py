"""Pivotal chi-square test for a single feature and the classical baseline.

Everything that needs an inverse runs in the K-dimensional Q-space, where
``M = sum_i (Q^T H_i Q) (x) x_i x_i^T`` is positive definite. The
(K+1)-space quantities are recovered by conjugating with ``Q``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg

from hidimlr.errors import (
    DegenerateProbabilities,
    DomainError,
    IndexOutOfRange,
    NotSPD,
    RankDeficient,
    SingularFisher,
)
from hidimlr.linalg import chi2_sf, psd_sqrt_pinv
from hidimlr.mle import FitResult, kron_hessian, q_space_hessians

WOODBURY_MIN_PROB = 1e-12


def choose_backend(n: int, p: int, K: int) -> str:
    """Woodbury only pays off when its (n+p) core is smaller than pK."""
    return "woodbury" if n + p < p * K else "dense"


class KronSolver:
    """Inverse action of ``D = sum_i H_i (x) x_i x_i^T`` on the complement of its kernel.

    ``D`` has kernel ``span{1 (x) e_j}``; :meth:`solve` returns ``D^+ v``.
    :meth:`leverages` returns ``S_i = (I_K (x) x_i)^T M^{-1} (I_K (x) x_i)``
    in Q-space, which is all that the V-matrices need.
    """

    def __init__(self, X, P, Q, backend: str = "auto"):
        X = np.asarray(X, dtype=float)
        P = np.asarray(P, dtype=float)
        n, p = X.shape
        K = P.shape[1] - 1
        if backend == "auto":
            backend = choose_backend(n, p, K)
        if backend not in ("dense", "woodbury"):
            raise DomainError(f"unknown backend {backend!r}")
        self.backend = backend
        self.X, self.P, self.Q = X, P, np.asarray(Q, dtype=float)
        self.n, self.p, self.K = n, p, K
        if backend == "dense":
            self._init_dense()
        else:
            self._init_woodbury()

    # -- dense ---------------------------------------------------------------
    def _init_dense(self):
        M = kron_hessian(self.X, q_space_hessians(self.P, self.Q))
        try:
            self._chol = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise NotSPD("Kronecker Hessian is not positive definite") from None

    # -- woodbury ------------------------------------------------------------
    def _init_woodbury(self):
        X, P = self.X, self.P
        n, p, K = self.n, self.p, self.K
        if P.min() < WOODBURY_MIN_PROB:
            raise DegenerateProbabilities(
                f"smallest fitted probability {P.min():.3e} is below {WOODBURY_MIN_PROB:g}")
        blocks, W = [], []
        for k in range(K + 1):
            Pk = (X * P[:, k, None]).T @ X
            try:
                f = scipy.linalg.cho_factor(Pk, lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                raise NotSPD(f"class block {k} is not positive definite") from None
            blocks.append(f)
            Uk = np.hstack([(X * P[:, k, None]).T, np.eye(p)])  # p x (n+p)
            W.append(scipy.linalg.cho_solve(f, Uk, check_finite=False))
        core = -np.eye(n + p)
        for k in range(K + 1):
            Uk = np.hstack([(X * P[:, k, None]).T, np.eye(p)])
            core += Uk.T @ W[k]
        core = (core + core.T) / 2
        try:
            self._core = scipy.linalg.lu_factor(core, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            raise RankDeficient("Woodbury core matrix is singular") from None
        if not np.all(np.isfinite(self._core[0])) or np.min(np.abs(np.diag(self._core[0]))) == 0:
            raise RankDeficient("Woodbury core matrix is singular")
        self._blocks = blocks
        self._W = W  # A_k^{-1} U_k

    def _woodbury_inverse(self, V):
        # (A - U U^T)^{-1} V for V of shape (p(K+1), m)
        p, K = self.p, self.K
        AinvV = np.vstack([
            scipy.linalg.cho_solve(self._blocks[k], V[k * p:(k + 1) * p], check_finite=False)
            for k in range(K + 1)
        ])
        UtAinvV = sum(self._W[k].T @ V[k * p:(k + 1) * p] for k in range(K + 1))
        Z = scipy.linalg.lu_solve(self._core, UtAinvV, check_finite=False)
        correction = np.vstack([self._W[k] @ Z for k in range(K + 1)])
        return AinvV - correction

    def _project(self, V):
        # (I - 11^T/(K+1)) (x) I_p applied to stacked class blocks
        p, K = self.p, self.K
        blocks = V.reshape(K + 1, p, -1)
        return (blocks - blocks.mean(axis=0, keepdims=True)).reshape(V.shape)

    def solve(self, v) -> np.ndarray:
        """``D^+ v`` for vectors in R^{p(K+1)} (class blocks outer)."""
        v = np.asarray(v, dtype=float)
        squeeze = v.ndim == 1
        V = v[:, None] if squeeze else v
        p, K = self.p, self.K
        if V.shape[0] != p * (K + 1):
            raise DomainError(f"expected {p * (K + 1)} rows, got {V.shape[0]}")
        if self.backend == "dense":
            Q = self.Q
            # (Q^T (x) I_p) v
            Vq = np.einsum("ak,apm->kpm", Q, V.reshape(K + 1, p, -1)).reshape(K * p, -1)
            Wq = scipy.linalg.cho_solve(self._chol, Vq, check_finite=False)
            out = np.einsum("ak,kpm->apm", Q, Wq.reshape(K, p, -1)).reshape(V.shape)
        else:
            out = self._project(self._woodbury_inverse(self._project(V)))
        return out[:, 0] if squeeze else out

    def leverages(self) -> np.ndarray:
        """Q-space blocks ``S_i`` with ``S_i[k, l] = x_i^T (M^{-1})_{kl} x_i``."""
        X, Q = self.X, self.Q
        n, p, K = self.n, self.p, self.K
        if self.backend == "dense":
            Minv = scipy.linalg.cho_solve(self._chol, np.eye(p * K), check_finite=False)
            S = np.empty((n, K, K))
            for k in range(K):
                for l in range(k, K):
                    block = Minv[k * p:(k + 1) * p, l * p:(l + 1) * p]
                    S[:, k, l] = np.einsum("ij,ij->i", X @ block, X)
                    S[:, l, k] = S[:, k, l]
            return S
        # (K+1)-space leverages from the Woodbury form, then rotate into Q-space
        XAinv = [scipy.linalg.cho_solve(self._blocks[k], X.T, check_finite=False)
                 for k in range(K + 1)]  # p x n each
        E = [self._W[k].T @ X.T for k in range(K + 1)]  # (n+p) x n each
        F = [scipy.linalg.lu_solve(self._core, E[k], check_finite=False) for k in range(K + 1)]
        S_full = np.empty((n, K + 1, K + 1))
        for k in range(K + 1):
            for l in range(k, K + 1):
                val = -np.einsum("mi,mi->i", E[k], F[l])
                if k == l:
                    val += np.einsum("ij,ji->i", X, XAinv[k])
                S_full[:, k, l] = val
                S_full[:, l, k] = val
        return np.einsum("ak,iab,bl->ikl", Q, S_full, Q, optimize=True)


def build_kron_solver(fit: FitResult, X, backend: str = "auto") -> KronSolver:
    return KronSolver(X, fit.P_hat, fit.Q, backend=backend)


def v_sum_q(fit: FitResult, X, solver: KronSolver) -> np.ndarray:
    """``(1/n) sum_i V_i`` in Q-space (K x K)."""
    Hq = q_space_hessians(fit.P_hat, fit.Q)
    S = solver.leverages()
    V = Hq - np.einsum("ikl,ilm,imr->ikr", Hq, S, Hq, optimize=True)
    Vbar = V.mean(axis=0)
    return (Vbar + Vbar.T) / 2


def compute_v_sum(fit: FitResult, X, solver: KronSolver | None = None) -> np.ndarray:
    """``(1/n) sum_i V_i`` in the (K+1)-space, with ``V_i`` the Schur-type correction of ``H_i``."""
    if solver is None:
        solver = build_kron_solver(fit, X)
    Q = fit.Q
    out = Q @ v_sum_q(fit, X, solver) @ Q.T
    return (out + out.T) / 2


def gradient_gram(fit: FitResult) -> np.ndarray:
    """``(1/n) sum_i g_i g_i^T`` in the (K+1)-space."""
    G = fit.G
    out = G.T @ G / G.shape[0]
    return (out + out.T) / 2


def whitening_matrix(K: int) -> np.ndarray:
    """``(I_K + 1 1^T / (sqrt(K+1) + 1)) R^T``, shape K x (K+1)."""
    W = np.eye(K) + np.ones((K, K)) / (np.sqrt(K + 1) + 1)
    return np.hstack([W, np.zeros((K, 1))])


@dataclass(frozen=True)
class TestReport:
    __test__ = False  # not a pytest class

    feature_index: int
    statistic: float
    dof: int
    p_value: float
    omega_jj: float
    omega_source: str
    classical_statistic: float
    classical_p_value: float
    whitened_coordinate: tuple

    def to_dict(self) -> dict:
        d = asdict(self)
        d["whitened_coordinate"] = list(self.whitened_coordinate)
        return d


def _check_feature(j, p):
    if int(j) != j or not 0 <= j < p:
        raise IndexOutOfRange(f"feature index {j} outside [0, {p})")
    return int(j)


def estimate_omega_jj(X, j: int) -> float:
    """Precision-diagonal estimate ``(n-p+1) / ||residual of X_j on X_{-j}||^2``."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    j = _check_feature(j, p)
    if not n > p:
        raise DomainError("need n > p")
    xj = X[:, j]
    others = np.delete(X, j, axis=1)
    if others.shape[1]:
        Qo, R = np.linalg.qr(others)
        d = np.abs(np.diag(R))
        if d.min() <= max(n, p) * np.finfo(float).eps * d.max():
            raise RankDeficient("X without column j is rank deficient")
        resid = xj - Qo @ (Qo.T @ xj)
    else:
        resid = xj
    rss = float(resid @ resid)
    if rss <= max(n, p) * np.finfo(float).eps * float(xj @ xj):
        raise RankDeficient("column j lies in the span of the other columns")
    return (n - p + 1) / rss


def omega_from_sigma(Sigma, j: int) -> float:
    """``(Sigma^{-1})_jj`` by a single SPD solve."""
    Sigma = np.asarray(Sigma, dtype=float)
    j = _check_feature(j, Sigma.shape[0])
    e = np.zeros(Sigma.shape[0])
    e[j] = 1.0
    try:
        f = scipy.linalg.cho_factor(Sigma, lower=True)
    except np.linalg.LinAlgError:
        raise NotSPD("Sigma is not positive definite") from None
    return float(scipy.linalg.cho_solve(f, e)[j])


def _resolve_omega(X, j, omega):
    if omega is None or omega == "estimate":
        return estimate_omega_jj(X, j), "estimated"
    omega = float(omega)
    if not omega > 0:
        raise DomainError("omega_jj must be positive")
    return omega, "known"


def pivotal_statistic(fit: FitResult, X, j: int, omega_jj: float,
                      solver: KronSolver | None = None) -> tuple[float, np.ndarray]:
    """Return the chi-square statistic and its whitened K-vector."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    K, Q = fit.K, fit.Q
    if solver is None:
        solver = build_kron_solver(fit, X)
    Gq = fit.G @ Q
    gram_q = Gq.T @ Gq / n
    Vq = v_sum_q(fit, X, solver)
    b = fit.B_hat_q[j]  # = Q^T R A^T e_j
    z = np.sqrt(n / omega_jj) * (psd_sqrt_pinv(gram_q) @ (Vq @ b))
    stat = float(z @ z)
    whitened = whitening_matrix(K) @ (Q @ z)
    return stat, whitened


def classical_test(fit: FitResult, X, j: int, omega=None) -> tuple[float, float]:
    """Fisher-information test with plug-in probabilities.

    ``omega`` is a known ``Omega_jj`` or ``None`` for the estimate.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    j = _check_feature(j, p)
    omega_jj, _ = _resolve_omega(X, j, omega)
    K = fit.K
    pi = fit.P_hat[:, :K]
    fisher = np.diag(pi.mean(axis=0)) - pi.T @ pi / n
    a = fit.A_hat[j]
    try:
        scipy.linalg.cho_factor(fisher, lower=True)
    except np.linalg.LinAlgError:
        raise SingularFisher("empirical Fisher matrix is singular") from None
    # n ||S_j^{-1/2} a||^2 with S_j = omega_jj * fisher^{-1}
    stat = float(n * (a @ fisher @ a) / omega_jj)
    stat = max(stat, 0.0)
    return stat, chi2_sf(stat, K)


def test_feature(fit: FitResult, X, j: int, omega=None, solver: KronSolver | None = None,
                 backend: str = "auto") -> TestReport:
    """Test whether feature ``j`` (0-based) is a null covariate.

    ``omega`` is either a known ``Omega_jj`` or ``None``/``"estimate"`` to
    use the residual-variance estimate.
    """
    X = np.asarray(X, dtype=float)
    j = _check_feature(j, X.shape[1])
    omega_jj, source = _resolve_omega(X, j, omega)
    if solver is None:
        solver = build_kron_solver(fit, X, backend)
    stat, whitened = pivotal_statistic(fit, X, j, omega_jj, solver)
    cl_stat, cl_p = classical_test(fit, X, j, omega_jj)
    return TestReport(
        feature_index=j,
        statistic=stat,
        dof=fit.K,
        p_value=chi2_sf(stat, fit.K),
        omega_jj=omega_jj,
        omega_source=source,
        classical_statistic=cl_stat,
        classical_p_value=cl_p,
        whitened_coordinate=tuple(float(v) for v in whitened),
    )


test_feature.__test__ = False
