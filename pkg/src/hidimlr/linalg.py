"""Small dense symmetric linear algebra and chi-square distribution functions.

Matrices here are at most a few hundred rows except inside the structured
solvers of :mod:`hidimlr.inference`, which never need a full eigensystem.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import scipy.linalg
from scipy.optimize import brentq

from hidimlr.errors import DomainError, NonFinite, NotPSD, NotSPD

_EPS = np.finfo(float).eps


class EigDecomp(NamedTuple):
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # orthonormal columns


def as_symmetric(M, atol: float = 1e-8) -> np.ndarray:
    """Validate a square finite matrix and return its exactly symmetric part.

    Asymmetry larger than ``atol * (1 + max|M|)`` is treated as a caller bug.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NonFinite("matrix has non-finite entries")
    scale = 1.0 + (np.abs(M).max() if M.size else 0.0)
    if M.size and np.abs(M - M.T).max() > atol * scale:
        raise DomainError("matrix is not symmetric")
    return (M + M.T) / 2


def sym_eig(M) -> EigDecomp:
    M = as_symmetric(M)
    w, V = np.linalg.eigh(M)
    return EigDecomp(w, V)


def psd_sqrt_pinv(M, rel_tol: float | None = None) -> np.ndarray:
    """Pseudo-inverse of the PSD square root of ``M``.

    Eigenvalues at or below ``rel_tol * lambda_max`` are treated as zero;
    the default cutoff is ``dim * eps``.
    """
    M = as_symmetric(M)
    dim = M.shape[0]
    if rel_tol is None:
        rel_tol = dim * _EPS
    w, V = np.linalg.eigh(M)
    lam_max = max(w[-1], 0.0) if dim else 0.0
    cutoff = rel_tol * lam_max
    if dim and w[0] < -cutoff:
        raise NotPSD(f"eigenvalue {w[0]:.3e} below -{cutoff:.3e}")
    keep = w > cutoff
    Vk = V[:, keep]
    out = (Vk / np.sqrt(w[keep])) @ Vk.T
    return (out + out.T) / 2


def spd_solve(A, B) -> np.ndarray:
    """Solve ``A X = B`` for symmetric positive definite ``A`` by Cholesky."""
    A = as_symmetric(A)
    B = np.asarray(B, dtype=float)
    if not np.all(np.isfinite(B)):
        raise NonFinite("right-hand side has non-finite entries")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotSPD(str(exc)) from None
    return scipy.linalg.cho_solve(factor, B, check_finite=False)


# --- regularized incomplete gamma -------------------------------------------

_MAX_TERMS = 10_000
_TINY = 1e-300


def _log_prefactor(a: float, x: float) -> float:
    return a * math.log(x) - x - math.lgamma(a)


def _lower_series(a: float, x: float) -> float:
    # P(a, x) for x < a + 1
    ap = a
    term = total = 1.0 / a
    for _ in range(_MAX_TERMS):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(_log_prefactor(a, x))


def _upper_continued_fraction(a: float, x: float) -> float:
    # Q(a, x) for x >= a + 1, modified Lentz
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_TERMS):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(_log_prefactor(a, x)) * h


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function Q(a, x)."""
    if a <= 0:
        raise DomainError("shape parameter must be positive")
    if x < 0:
        raise DomainError("argument must be non-negative")
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    if x < a + 1.0:
        return 1.0 - _lower_series(a, x)
    return _upper_continued_fraction(a, x)


def _check_dof(K) -> int:
    if int(K) != K or K < 1:
        raise DomainError(f"degrees of freedom must be a positive integer, got {K}")
    return int(K)


def chi2_sf(t: float, K: int) -> float:
    """Survival function of the chi-square distribution with ``K`` dof."""
    K = _check_dof(K)
    t = float(t)
    if math.isnan(t):
        raise NonFinite("t is NaN")
    if t < 0:
        raise DomainError(f"t must be non-negative, got {t}")
    return min(1.0, max(0.0, gamma_q(K / 2.0, t / 2.0)))


def chi2_quantile(alpha: float, K: int) -> float:
    """Upper quantile: the value whose survival probability is ``alpha``."""
    K = _check_dof(K)
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    if K == 2:
        return -2.0 * math.log(alpha)
    hi = max(2.0 * K, 1.0)
    while chi2_sf(hi, K) > alpha:
        hi *= 2.0
    return brentq(lambda t: chi2_sf(t, K) - alpha, 0.0, hi,
                  xtol=1e-300, rtol=4 * _EPS, maxiter=500)
