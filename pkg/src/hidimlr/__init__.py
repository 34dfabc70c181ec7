"""High-dimensional significance tests for multinomial logistic regression."""

__version__ = "0.1.0"

from hidimlr.errors import (  # noqa: E402
    DegenerateProbabilities,
    DomainError,
    HidimlrError,
    IndexOutOfRange,
    MaxIterations,
    NonFinite,
    NotPSD,
    NotSPD,
    RankDeficient,
    SingularFisher,
    TooManyFailures,
    Unbounded,
)
from hidimlr.inference import (  # noqa: E402
    KronSolver,
    TestReport,
    build_kron_solver,
    classical_test,
    compute_v_sum,
    estimate_omega_jj,
    test_feature,
)
from hidimlr.mle import Dataset, FitConfig, FitResult, build_Q, fit_mle  # noqa: E402
from hidimlr.simulate import SimConfig, SimSummary, run_monte_carlo  # noqa: E402

__all__ = [
    "Dataset", "FitConfig", "FitResult", "build_Q", "fit_mle",
    "KronSolver", "TestReport", "build_kron_solver", "classical_test", "compute_v_sum",
    "estimate_omega_jj", "test_feature",
    "SimConfig", "SimSummary", "run_monte_carlo",
    "HidimlrError", "DomainError", "NonFinite", "NotPSD", "NotSPD", "RankDeficient",
    "SingularFisher", "DegenerateProbabilities", "IndexOutOfRange", "MaxIterations",
    "Unbounded", "TooManyFailures",
]
