"""Cross-entropy MLE for multinomial logistic regression.

Three coordinate systems for the coefficients are used throughout:

* ``B`` (p x (K+1)), one column per class, identified only up to adding
  ``b 1^T``; we always report the centered representative ``B 1 = 0``.
* ``A`` (p x K), log-odds against the last class (the reference class).
* ``Bq`` (p x K), coordinates in an orthonormal basis ``Q`` of the
  complement of the all-ones vector. The loss is strictly convex here, so
  Newton's method runs in this space.

Vectorized coefficients follow the column-stacked convention: class blocks
are outer, features inner, so the Hessian is ``sum_i H_i (x) x_i x_i^T``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from hidimlr.errors import (
    DomainError,
    MaxIterations,
    NonFinite,
    RankDeficient,
    Unbounded,
)

logger = logging.getLogger(__name__)

_GRID_TOL = 1e-9


@dataclass(frozen=True)
class Dataset:
    """Design matrix ``X`` (n x p) and responses ``Y`` (n x (K+1)).

    With ``q > 1`` each row of ``Y`` is the average of ``q`` one-hot labels.
    """

    X: np.ndarray
    Y: np.ndarray
    q: int = 1

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=float)
        Y = np.ascontiguousarray(self.Y, dtype=float)
        if X.ndim != 2 or Y.ndim != 2:
            raise DomainError("X and Y must be 2-d arrays")
        n, p = X.shape
        if Y.shape[0] != n:
            raise DomainError(f"X has {n} rows but Y has {Y.shape[0]}")
        if Y.shape[1] < 2:
            raise DomainError("Y needs at least two class columns")
        if not n > p >= 1:
            raise DomainError(f"need n > p >= 1, got n={n}, p={p}")
        if int(self.q) != self.q or self.q < 1:
            raise DomainError("q must be a positive integer")
        if not np.all(np.isfinite(X)):
            raise NonFinite("X has non-finite entries")
        if not np.all(np.isfinite(Y)):
            raise NonFinite("Y has non-finite entries")
        scaled = Y * self.q
        if np.abs(scaled - np.round(scaled)).max() > _GRID_TOL * self.q or Y.min() < -_GRID_TOL:
            raise DomainError(f"Y entries must lie on the grid {{0, 1/{self.q}, ..., 1}}")
        if np.abs(Y.sum(axis=1) - 1.0).max() > _GRID_TOL:
            raise DomainError("rows of Y must sum to 1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "q", int(self.q))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.Y.shape[1] - 1

    @classmethod
    def from_labels(cls, X, labels, n_classes: int | None = None) -> "Dataset":
        """Build a one-hot dataset from 0-based integer labels."""
        labels = np.asarray(labels)
        if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
            raise DomainError("labels must be a 1-d integer array")
        if labels.min() < 0:
            raise DomainError("labels must be non-negative")
        n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
        if labels.max() >= n_classes:
            raise DomainError("label exceeds n_classes - 1")
        Y = np.zeros((labels.size, n_classes))
        Y[np.arange(labels.size), labels] = 1.0
        return cls(X, Y)

    def expand_one_hot(self) -> "Dataset":
        """The equivalent q*n one-hot dataset (rows of X repeated q times)."""
        counts = np.rint(self.Y * self.q).astype(int)
        rows, labels = [], []
        for i, c in enumerate(counts):
            for k in np.flatnonzero(c):
                rows.extend([i] * c[k])
                labels.extend([k] * c[k])
        return Dataset.from_labels(self.X[rows], np.asarray(labels), self.K + 1)


@dataclass(frozen=True)
class FitConfig:
    grad_tol: float | None = None  # None means 1e-9 * n
    max_iter: int = 200
    tau: float = 50.0
    gamma: float = 0.05
    line_search_shrink: float = 0.5
    armijo: float = 1e-4

    def __post_init__(self):
        for name in ("max_iter", "tau", "gamma"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.grad_tol is not None and not self.grad_tol > 0:
            raise DomainError("grad_tol must be positive")
        if not 0 < self.line_search_shrink < 1:
            raise DomainError("line_search_shrink must lie in (0, 1)")

    def resolved_grad_tol(self, n: int) -> float:
        return 1e-9 * n if self.grad_tol is None else self.grad_tol


@dataclass(frozen=True)
class FitResult:
    A_hat: np.ndarray
    B_hat_centered: np.ndarray
    B_hat_q: np.ndarray
    Q: np.ndarray
    P_hat: np.ndarray
    G: np.ndarray
    iterations: int
    final_grad_norm: float
    boundedness: float
    loss: float
    loss_trace: tuple = field(default=(), repr=False)

    @property
    def n(self) -> int:
        return self.P_hat.shape[0]

    @property
    def K(self) -> int:
        return self.P_hat.shape[1] - 1

    def hessians(self) -> np.ndarray:
        """Per-observation Hessians ``diag(p_i) - p_i p_i^T``, shape (n, K+1, K+1)."""
        return hessians_from_probs(self.P_hat)


def softmax_probs(u) -> np.ndarray:
    """Softmax over the last axis, stable for any finite input."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise NonFinite("logits must be finite")
    z = u - u.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(U, Y) -> float:
    """Total loss ``sum_i [-y_i . u_i + logsumexp(u_i)]``."""
    U = np.asarray(U, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if not np.all(np.isfinite(U)):
        raise NonFinite("logits must be finite")
    U = np.atleast_2d(U)
    Y = np.atleast_2d(Y)
    return float(np.sum(logsumexp(U, axis=1)) - np.sum(Y * U))


def per_obs_grad_hess(p_hat, y) -> tuple[np.ndarray, np.ndarray]:
    p_hat = np.asarray(p_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    if p_hat.shape != y.shape or p_hat.ndim != 1:
        raise DomainError("p_hat and y must be vectors of the same length")
    if p_hat.min() < 0 or abs(p_hat.sum() - 1.0) > 1e-10:
        raise DomainError("p_hat is not a probability vector")
    return p_hat - y, np.diag(p_hat) - np.outer(p_hat, p_hat)


def hessians_from_probs(P) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    H = -P[:, :, None] * P[:, None, :]
    idx = np.arange(P.shape[1])
    H[:, idx, idx] += P
    return H


def build_Q(K: int) -> np.ndarray:
    """Orthonormal basis (K+1) x K of the complement of the all-ones vector.

    Built from the Householder reflection that sends ``1/sqrt(K+1)`` to the
    last canonical vector, so the result is deterministic.
    """
    if int(K) != K or K < 1:
        raise DomainError("K must be a positive integer")
    K = int(K)
    m = K + 1
    v = np.full(m, 1.0 / np.sqrt(m))
    v[-1] -= 1.0
    H = np.eye(m) - 2.0 * np.outer(v, v) / (v @ v)
    return H[:, :K].copy()


def log_odds_from_centered(B) -> np.ndarray:
    """Reference-class coefficients ``A = B (I_K, -1_K)^T``."""
    B = np.asarray(B, dtype=float)
    return B[:, :-1] - B[:, -1:]


def centered_from_log_odds(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    B = np.hstack([A, np.zeros((A.shape[0], 1))])
    return B - B.mean(axis=1, keepdims=True)


def check_balance(Y, gamma: float, q: int = 1) -> tuple[bool, np.ndarray]:
    """Whether every class is observed in at least ``gamma * n`` rows.

    A class counts as observed in row i when ``y_ik >= 1/q``.
    """
    Y = np.asarray(Y, dtype=float)
    counts = np.sum(Y >= (1.0 - 1e-9) / q, axis=0).astype(int)
    return bool(np.all(counts >= gamma * Y.shape[0])), counts


def boundedness_metric(X, B_centered) -> float:
    return float(np.sum((X @ B_centered) ** 2) / X.shape[0])


def check_boundedness(fit: FitResult, tau: float) -> bool:
    return fit.boundedness <= tau


def q_space_hessians(P, Q) -> np.ndarray:
    """``Q^T H_i Q`` for every row of ``P``, shape (n, K, K)."""
    PQ = P @ Q
    Hq = np.einsum("ak,ia,al->ikl", Q, P, Q, optimize=True)
    Hq -= PQ[:, :, None] * PQ[:, None, :]
    return Hq


def kron_hessian(X, Hq) -> np.ndarray:
    """Assemble ``sum_i Hq_i (x) x_i x_i^T`` (pK x pK)."""
    n, p = X.shape
    K = Hq.shape[1]
    M = np.empty((p * K, p * K))
    for k in range(K):
        for l in range(k, K):
            block = (X * Hq[:, k, l, None]).T @ X
            M[k * p:(k + 1) * p, l * p:(l + 1) * p] = block
            if l != k:
                M[l * p:(l + 1) * p, k * p:(k + 1) * p] = block.T
    return M


def _loss_q(X, Y, Q, Bq) -> float:
    return cross_entropy(X @ Bq @ Q.T, Y)


def fit_mle(data: Dataset, config: FitConfig | None = None, Q=None) -> FitResult:
    """Newton's method with Armijo backtracking in the Q-parametrization.

    Raises :class:`Unbounded` as soon as the boundedness metric exceeds
    ``config.tau``, which is how separable data shows up.
    """
    config = config or FitConfig()
    X, Y = data.X, data.Y
    n, p, K = data.n, data.p, data.K
    Q = build_Q(K) if Q is None else np.asarray(Q, dtype=float)
    grad_tol = config.resolved_grad_tol(n)

    balanced, counts = check_balance(Y, config.gamma, data.q)
    if not balanced:
        warnings.warn(f"unbalanced labels: class counts {counts.tolist()} "
                      f"below gamma*n = {config.gamma * n:.1f}", stacklevel=2)

    Bq = np.zeros((p, K))
    U = np.zeros((n, K + 1))
    loss = cross_entropy(U, Y)
    trace = [loss]
    # slack for round-off in loss differences near the optimum
    slack = 8 * np.finfo(float).eps

    for it in range(config.max_iter + 1):
        P = softmax_probs(U)
        G = P - Y
        grad_full = X.T @ G
        grad_norm = float(np.abs(grad_full).max())
        if grad_norm <= grad_tol:
            break
        if it == config.max_iter:
            raise MaxIterations(f"no convergence after {it} Newton steps "
                                f"(|grad|_inf = {grad_norm:.3e})",
                                iterations=it, grad_norm=grad_norm)
        grad = (grad_full @ Q).T.reshape(-1)  # class-block-major
        M = kron_hessian(X, q_space_hessians(P, Q))
        try:
            factor = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise RankDeficient("Newton system is numerically singular") from None
        step = -scipy.linalg.cho_solve(factor, grad, check_finite=False)
        if not np.all(np.isfinite(step)):
            raise RankDeficient("Newton system is numerically singular")
        step_mat = step.reshape(K, p).T
        slope = float(grad @ step)

        t = 1.0
        while True:
            cand = Bq + t * step_mat
            cand_loss = _loss_q(X, Y, Q, cand)
            if cand_loss <= loss + config.armijo * t * slope + slack * abs(loss):
                break
            t *= config.line_search_shrink
            if t < 1e-12:
                raise MaxIterations("line search failed to decrease the loss",
                                    iterations=it, grad_norm=grad_norm)
        Bq = cand
        loss = cand_loss
        trace.append(loss)
        U = X @ Bq @ Q.T
        metric = float(np.sum((X @ Bq) ** 2) / n)
        if metric > config.tau:
            raise Unbounded(f"MLE does not exist or is unbounded: boundedness metric "
                            f"{metric:.4g} exceeds tau={config.tau:g} "
                            "(the classes may be separable)",
                            metric=metric, tau=config.tau)
        logger.debug("newton it=%d loss=%.12g step=%.3g |grad|=%.3e", it, loss, t, grad_norm)

    B_centered = Bq @ Q.T
    metric = boundedness_metric(X, B_centered)
    if metric > config.tau:
        raise Unbounded(f"boundedness metric {metric:.4g} exceeds tau={config.tau:g}",
                        metric=metric, tau=config.tau)
    return FitResult(
        A_hat=log_odds_from_centered(B_centered),
        B_hat_centered=B_centered,
        B_hat_q=Bq,
        Q=Q,
        P_hat=P,
        G=G,
        iterations=it,
        final_grad_norm=grad_norm,
        boundedness=metric,
        loss=loss,
        loss_trace=tuple(trace),
    )
