"""Synthetic data and the Monte Carlo harness for null-coordinate experiments.

Every random quantity comes from a Philox stream keyed by ``(seed, stream,
rep)``, so a run is a pure function of its configuration and repetitions
can be executed in any order or in parallel.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from threadpoolctl import threadpool_limits

from hidimlr.errors import DomainError, EmptyInput, HidimlrError, RankDeficient, TooManyFailures
from hidimlr.inference import build_kron_solver, omega_from_sigma, test_feature
from hidimlr.linalg import chi2_quantile, sym_eig
from hidimlr.mle import Dataset, FitConfig, fit_mle, softmax_probs

SCHEMA = "hidimlr/1"
FAMILIES = ("gaussian", "rademacher", "snp")
MAX_FAILURE_RATE = 0.2

_STREAM_COEF = 0
_STREAM_REP = 1


def make_rng(seed: int, stream: int = _STREAM_COEF, rep: int = 0) -> np.random.Generator:
    """Counter-based generator for one (seed, stream, rep) substream."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    key = (stream << 64) | (seed ^ int(rep))
    return np.random.Generator(np.random.Philox(key=key))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return make_rng(seed)


def gen_sigma_ar1(p: int, rho: float) -> np.ndarray:
    if not 0 <= rho < 1:
        raise DomainError(f"rho must lie in [0, 1), got {rho}")
    if p < 1:
        raise DomainError("p must be positive")
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :]).astype(float)


def sqrtm_psd(Sigma) -> np.ndarray:
    w, V = sym_eig(Sigma)
    if w[0] <= 0:
        raise DomainError("Sigma must be positive definite")
    return (V * np.sqrt(w)) @ V.T


def gen_coefficients(p: int, K: int, Sigma, seed) -> np.ndarray:
    """Sparse coefficients normalized so that ``A^T Sigma A = I_K``.

    The first ``ceil(p/4)`` rows are standard normal, the rest are zero.
    """
    rng = _as_rng(seed)
    s = math.ceil(p / 4)
    if s >= p:
        raise DomainError("need ceil(p/4) < p so that the last feature is null")
    A0 = np.zeros((p, K))
    A0[:s] = rng.standard_normal((s, K))
    gram = A0.T @ np.asarray(Sigma) @ A0
    w, V = np.linalg.eigh((gram + gram.T) / 2)
    if w[0] <= 1e-12 * max(w[-1], 1.0):
        raise RankDeficient("A0^T Sigma A0 is singular")
    A = A0 @ ((V / np.sqrt(w)) @ V.T)
    A[s:] = 0.0
    return A


def snp_frequencies(p: int) -> np.ndarray:
    return np.linspace(0.25, 0.75, p)


def snp_genotypes(n: int, p: int, rng) -> np.ndarray:
    """Values in {0, 1, 2} with probabilities (a^2, 2a(1-a), (1-a)^2) per column."""
    a = snp_frequencies(p)
    probs = np.stack([a ** 2, 2 * a * (1 - a), (1 - a) ** 2], axis=1)
    cum = np.cumsum(probs, axis=1)
    u = rng.random((n, p))
    return (u[:, :, None] > cum[None, :, :2]).sum(axis=2).astype(float)


def standardized_covariates(n: int, p: int, family: str, seed) -> np.ndarray:
    """Independent columns with mean 0 and unit variance, before mixing."""
    rng = _as_rng(seed)
    if family == "gaussian":
        return rng.standard_normal((n, p))
    if family == "rademacher":
        return rng.choice(np.array([-1.0, 1.0]), size=(n, p))
    if family == "snp":
        a = snp_frequencies(p)
        mean = 2 * (1 - a)
        sd = np.sqrt(2 * a * (1 - a))
        return (snp_genotypes(n, p, rng) - mean) / sd
    raise DomainError(f"unknown covariate family {family!r}; expected one of {FAMILIES}")


def gen_covariates(n: int, p: int, family: str, Sigma, seed, Sigma_sqrt=None) -> np.ndarray:
    """Rows with covariance ``Sigma``: standardized draws times ``Sigma^{1/2}``."""
    Z = standardized_covariates(n, p, family, seed)
    root = sqrtm_psd(Sigma) if Sigma_sqrt is None else Sigma_sqrt
    return Z @ root


def gen_labels(X, A, q: int, seed) -> np.ndarray:
    """Average of ``q`` one-hot draws from softmax of ``(X A, 0)``."""
    rng = _as_rng(seed)
    if int(q) != q or q < 1:
        raise DomainError("q must be a positive integer")
    X = np.asarray(X, dtype=float)
    U = np.hstack([X @ A, np.zeros((X.shape[0], 1))])
    P = softmax_probs(U)
    counts = rng.multinomial(int(q), P)
    return counts / q


def ks_distance(pvals) -> float:
    """Kolmogorov distance between the empirical CDF and Uniform(0, 1)."""
    u = np.sort(np.asarray(pvals, dtype=float))
    m = u.size
    if m == 0:
        raise EmptyInput("no p-values")
    if u[0] < 0 or u[-1] > 1:
        raise DomainError("p-values must lie in [0, 1]")
    i = np.arange(1, m + 1)
    return float(max(np.max(i / m - u), np.max(u - (i - 1) / m)))


@dataclass(frozen=True)
class SimConfig:
    n: int
    p: int
    K: int
    reps: int
    q: int = 1
    rho: float = 0.5
    covariate_family: str = "gaussian"
    seed: int = 0
    alpha: float = 0.05
    null_index: int | None = None  # 1-based; None means p
    omega_mode: str = "estimated"
    backend: str = "auto"
    tau: float = 50.0
    max_iter: int = 200

    def __post_init__(self):
        if self.null_index is None:
            object.__setattr__(self, "null_index", self.p)
        if not self.n > self.p >= 1:
            raise DomainError("need n > p >= 1")
        if self.K < 1 or self.q < 1 or self.reps < 1:
            raise DomainError("K, q and reps must be positive")
        if not 0 <= self.rho < 1:
            raise DomainError("rho must lie in [0, 1)")
        if self.covariate_family not in FAMILIES:
            raise DomainError(f"covariate_family must be one of {FAMILIES}")
        if not 0 < self.alpha < 1:
            raise DomainError("alpha must lie in (0, 1)")
        if not 1 <= self.null_index <= self.p:
            raise DomainError("null_index must lie in [1, p]")
        if self.omega_mode not in ("known", "estimated"):
            raise DomainError("omega_mode must be 'known' or 'estimated'")
        if self.backend not in ("auto", "dense", "woodbury"):
            raise DomainError("backend must be 'auto', 'dense' or 'woodbury'")
        if not 0 <= self.seed < 2 ** 64:
            raise DomainError("seed must be an unsigned 64-bit integer")

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"schema"}
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**{k: v for k, v in d.items() if k in known})
        except TypeError as exc:
            raise DomainError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RepResult:
    rep: int
    status: str
    T_hd: float = math.nan
    p_hd: float = math.nan
    T_cl: float = math.nan
    p_cl: float = math.nan


@dataclass
class SimSummary:
    config: SimConfig
    reps: list[RepResult]
    n_success: int
    failures: dict
    type_I_error_hd: float
    type_I_error_cl: float
    coverage_hd: float
    coverage_cl: float
    ks_hd: float
    ks_cl: float
    qq_hd: list
    qq_cl: list
    mean_T_hd: float
    mean_T_cl: float
    duration_seconds: float = field(default=0.0, compare=False)

    def to_dict(self, include_reps: bool = True) -> dict:
        d = {
            "schema": SCHEMA,
            "config": self.config.to_dict(),
            "n_success": self.n_success,
            "failures": dict(sorted(self.failures.items())),
            "type_I_error_hd": self.type_I_error_hd,
            "type_I_error_cl": self.type_I_error_cl,
            "coverage_hd": self.coverage_hd,
            "coverage_cl": self.coverage_cl,
            "ks_hd": self.ks_hd,
            "ks_cl": self.ks_cl,
            "mean_T_hd": self.mean_T_hd,
            "mean_T_cl": self.mean_T_cl,
            "qq_hd": self.qq_hd,
            "qq_cl": self.qq_cl,
            "duration_seconds": self.duration_seconds,
        }
        if include_reps:
            d["reps"] = [{k: (None if isinstance(v, float) and math.isnan(v) else v)
                          for k, v in asdict(r).items()} for r in self.reps]
        return d


@dataclass(frozen=True)
class _Truth:
    Sigma: np.ndarray
    Sigma_sqrt: np.ndarray
    A: np.ndarray
    omega_jj: float


def _truth(config: SimConfig) -> _Truth:
    Sigma = gen_sigma_ar1(config.p, config.rho)
    A = gen_coefficients(config.p, config.K, Sigma, make_rng(config.seed, _STREAM_COEF))
    j = config.null_index - 1
    A[j] = 0.0
    return _Truth(Sigma, sqrtm_psd(Sigma), A, omega_from_sigma(Sigma, j))


def run_rep(config: SimConfig, truth: _Truth, rep: int) -> RepResult:
    """One repetition; modelled failures come back as a status string."""
    rng = make_rng(config.seed, _STREAM_REP, rep)
    j = config.null_index - 1
    with threadpool_limits(limits=1):
        X = gen_covariates(config.n, config.p, config.covariate_family, truth.Sigma, rng,
                           Sigma_sqrt=truth.Sigma_sqrt)
        Y = gen_labels(X, truth.A, config.q, rng)
        try:
            data = Dataset(X, Y, config.q)
            fit = fit_mle(data, FitConfig(tau=config.tau, max_iter=config.max_iter))
            omega = truth.omega_jj if config.omega_mode == "known" else None
            solver = build_kron_solver(fit, X, config.backend)
            report = test_feature(fit, X, j, omega=omega, solver=solver)
        except HidimlrError as exc:
            return RepResult(rep, type(exc).__name__)
    return RepResult(rep, "ok", float(report.statistic), float(report.p_value),
                     float(report.classical_statistic), float(report.classical_p_value))


def _run_chunk(config: SimConfig, reps: list[int]) -> list[RepResult]:
    truth = _truth(config)
    return [run_rep(config, truth, r) for r in reps]


def thread_cap() -> int:
    raw = os.environ.get("HIDIMLR_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise DomainError(f"HIDIMLR_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def _qq_pairs(stats, K):
    s = np.sort(np.asarray(stats, dtype=float))
    m = s.size
    return [[float(v), chi2_quantile(1 - (i + 0.5) / m, K)] for i, v in enumerate(s)]


def summarize(config: SimConfig, results: list[RepResult]) -> SimSummary:
    # merge keyed by rep index so float reductions do not depend on worker order
    results = sorted(results, key=lambda r: r.rep)
    ok = [r for r in results if r.status == "ok"]
    failures: dict[str, int] = {}
    for r in results:
        if r.status != "ok":
            failures[r.status] = failures.get(r.status, 0) + 1
    n_fail = len(results) - len(ok)
    if n_fail > MAX_FAILURE_RATE * len(results):
        raise TooManyFailures(f"{n_fail} of {len(results)} repetitions failed: {failures}",
                              failures=failures)
    p_hd = np.array([r.p_hd for r in ok])
    p_cl = np.array([r.p_cl for r in ok])
    T_hd = np.array([r.T_hd for r in ok])
    T_cl = np.array([r.T_cl for r in ok])
    crit = chi2_quantile(config.alpha, config.K)
    return SimSummary(
        config=config,
        reps=results,
        n_success=len(ok),
        failures=failures,
        type_I_error_hd=float(np.mean(p_hd < config.alpha)),
        type_I_error_cl=float(np.mean(p_cl < config.alpha)),
        coverage_hd=float(np.mean(T_hd <= crit)),
        coverage_cl=float(np.mean(T_cl <= crit)),
        ks_hd=ks_distance(p_hd),
        ks_cl=ks_distance(p_cl),
        qq_hd=_qq_pairs(T_hd, config.K),
        qq_cl=_qq_pairs(T_cl, config.K),
        mean_T_hd=float(T_hd.mean()),
        mean_T_cl=float(T_cl.mean()),
    )


def run_monte_carlo(config: SimConfig, threads: int | None = None) -> SimSummary:
    """Run ``config.reps`` repetitions and aggregate them.

    ``threads`` caps the number of worker processes (default from
    ``HIDIMLR_THREADS`` or the CPU count). BLAS runs single-threaded inside
    each repetition, so results do not depend on the cap.
    """
    start = time.perf_counter()
    threads = thread_cap() if threads is None else max(1, int(threads))
    all_reps = list(range(config.reps))
    if threads == 1 or config.reps == 1:
        results = _run_chunk(config, all_reps)
    else:
        chunks = [all_reps[w::threads] for w in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(_run_chunk, [config] * len(chunks), chunks)
            results = [r for part in parts for r in part]
    summary = summarize(config, results)
    summary.duration_seconds = time.perf_counter() - start
    return summary


def write_raw_csv(summary: SimSummary, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("rep,T_hd,p_hd,T_cl,p_cl,status\n")
        for r in summary.reps:
            fh.write(f"{r.rep},{r.T_hd!r},{r.p_hd!r},{r.T_cl!r},{r.p_cl!r},{r.status}\n")
