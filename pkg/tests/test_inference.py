import numpy as np
import pytest

import hidimlr.mle as mle
from conftest import simulated_dataset
from hidimlr.errors import DegenerateProbabilities, DomainError, IndexOutOfRange, RankDeficient
from hidimlr.inference import (
    KronSolver,
    build_kron_solver,
    choose_backend,
    classical_test,
    compute_v_sum,
    estimate_omega_jj,
    omega_from_sigma,
    pivotal_statistic,
    test_feature as run_test,
    whitening_matrix,
)
from hidimlr.mle import Dataset, build_Q
from hidimlr.simulate import SimConfig, gen_sigma_ar1, ks_distance, run_monte_carlo
from oracles import (
    binary_v_hat,
    full_space_hessian,
    statistic_full_space,
    statistic_q_space,
    v_sum_full_pinv,
)


@pytest.fixture
def fitted_k2():
    data, _, _ = simulated_dataset(40, 8, 2, seed=21)
    return data, mle.fit_mle(data)


class TestKronSolver:
    def test_backends_agree(self, fitted_k2):
        data, fit = fitted_k2
        dense = build_kron_solver(fit, data.X, "dense")
        wood = build_kron_solver(fit, data.X, "woodbury")
        V = np.random.default_rng(0).normal(size=(data.p * 3, 20))
        a, b = dense.solve(V), wood.solve(V)
        assert np.linalg.norm(a - b) <= 1e-10 * np.linalg.norm(a)
        np.testing.assert_allclose(dense.leverages(), wood.leverages(), atol=1e-12)

    def test_matches_dense_pinv(self, fitted_k2):
        data, fit = fitted_k2
        D = full_space_hessian(data.X, fit.P_hat)
        Dp = np.linalg.pinv(D, rcond=1e-10, hermitian=True)
        v = np.random.default_rng(1).normal(size=data.p * 3)
        for backend in ("dense", "woodbury"):
            out = build_kron_solver(fit, data.X, backend).solve(v)
            np.testing.assert_allclose(out, Dp @ v, atol=1e-10 * np.abs(Dp @ v).max())

    def test_kernel_orthogonal(self, fitted_k2):
        data, fit = fitted_k2
        p = data.p
        v = np.random.default_rng(2).normal(size=p * 3)
        for backend in ("dense", "woodbury"):
            out = build_kron_solver(fit, data.X, backend).solve(v)
            np.testing.assert_allclose(out.reshape(3, p).sum(axis=0), 0, atol=1e-12)

    def test_hand_case(self):
        X = np.array([[1.0], [2.0], [-0.5]])
        p1 = np.array([0.3, 0.6, 0.45])
        P = np.column_stack([p1, 1 - p1])
        c = float(np.sum(p1 * (1 - p1) * X[:, 0] ** 2))
        expected = np.array([[1, -1], [-1, 1]]) / (4 * c)
        for backend in ("dense", "woodbury"):
            solver = KronSolver(X, P, build_Q(1), backend)
            np.testing.assert_allclose(solver.solve(np.eye(2)), expected, rtol=1e-12)

    def test_degenerate_probabilities(self):
        X = np.ones((3, 1))
        P = np.array([[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]])
        with pytest.raises(DegenerateProbabilities):
            KronSolver(X, P, build_Q(1), "woodbury")

    def test_unknown_backend(self, fitted_k2):
        data, fit = fitted_k2
        with pytest.raises(DomainError):
            build_kron_solver(fit, data.X, "sparse")

    def test_auto_rule(self):
        assert choose_backend(2000, 600, 2) == "dense"
        assert choose_backend(300, 600, 4) == "woodbury"


class TestVSum:
    def test_matches_pinv_oracle(self, fitted_k2):
        data, fit = fitted_k2
        expected = v_sum_full_pinv(data.X, fit.P_hat)
        for backend in ("dense", "woodbury"):
            got = compute_v_sum(fit, data.X, build_kron_solver(fit, data.X, backend))
            np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_kernel(self, fitted_k2):
        data, fit = fitted_k2
        V = compute_v_sum(fit, data.X)
        one = np.ones(3)
        assert abs(one @ V @ one) <= 1e-12
        np.testing.assert_allclose(V, V.T, atol=0)

    def test_binary_reduction(self):
        data, _, _ = simulated_dataset(100, 3, 1, seed=4)
        fit = mle.fit_mle(data)
        V = compute_v_sum(fit, data.X)
        w = np.linalg.eigvalsh(V)
        assert abs(w[0]) <= 1e-12
        assert w[1] == pytest.approx(2 * binary_v_hat(data.X, fit.A_hat[:, 0]), rel=1e-8)


class TestStatistic:
    def test_zero_row(self):
        # balanced design whose MLE is exactly zero
        X = np.array([[1.0, -1.0, -1.0, 1.0, 0.0]]).T
        Y = np.eye(2)[[0, 0, 1, 1, 1]]
        fit = mle.fit_mle(Dataset(X, Y))
        np.testing.assert_allclose(fit.A_hat, 0, atol=1e-12)
        r = run_test(fit, X, 0, omega=1.0)
        assert r.statistic <= 1e-20
        assert r.p_value == 1.0

    @pytest.mark.parametrize("K", [1, 2, 3])
    def test_formula_equivalence(self, K):
        data, _, _ = simulated_dataset(60, 12, K, seed=30 + K)
        fit = mle.fit_mle(data)
        j = 11
        stat, _ = pivotal_statistic(fit, data.X, j, 1.7)
        full = statistic_full_space(data.X, fit.P_hat, fit.G, fit.A_hat, j, 1.7)
        qsp = statistic_q_space(data.X, fit.P_hat, fit.G, fit.B_hat_centered, fit.Q, j, 1.7)
        assert abs(stat - full) <= 1e-8 * max(1, full)
        assert abs(stat - qsp) <= 1e-8 * max(1, qsp)

    def test_q_invariance(self):
        data, _, _ = simulated_dataset(60, 12, 3, seed=8)
        O = np.linalg.qr(np.random.default_rng(3).normal(size=(3, 3)))[0]
        a = mle.fit_mle(data)
        b = mle.fit_mle(data, Q=build_Q(3) @ O)
        sa, _ = pivotal_statistic(a, data.X, 11, 1.0)
        sb, _ = pivotal_statistic(b, data.X, 11, 1.0)
        assert abs(sa - sb) <= 1e-9 * max(1, sa)

    def test_scaling_invariance(self):
        data, _, _ = simulated_dataset(60, 5, 2, seed=9)
        c = 3.0
        scaled = Dataset(data.X * c, data.Y)
        a = mle.fit_mle(data)
        b = mle.fit_mle(scaled)
        np.testing.assert_allclose(b.A_hat, a.A_hat / c, atol=1e-9)
        sa, _ = pivotal_statistic(a, data.X, 4, 1.0)
        sb, _ = pivotal_statistic(b, scaled.X, 4, 1.0 / c ** 2)
        assert abs(sa - sb) <= 1e-8 * max(1, sa)

    @pytest.mark.parametrize("K", [1, 2, 4])
    def test_whitened_norm(self, K):
        data, _, _ = simulated_dataset(120, 16, K, seed=40 + K)
        fit = mle.fit_mle(data)
        stat, z = pivotal_statistic(fit, data.X, 15, 1.0)
        assert z.shape == (K,)
        assert float(z @ z) == pytest.approx(stat, rel=1e-10)

    def test_whitening_matrix_rows(self):
        for K in (1, 2, 5):
            W = whitening_matrix(K) @ build_Q(K)
            # orthogonal up to the sign/rotation fixed by Q
            np.testing.assert_allclose(W @ W.T, np.eye(K), atol=1e-12)

    def test_report_fields(self, small_data):
        fit = mle.fit_mle(small_data)
        r = run_test(fit, small_data.X, 4)
        assert r.dof == 2 and r.omega_source == "estimated" and r.feature_index == 4
        assert 0 <= r.p_value <= 1 and 0 <= r.classical_p_value <= 1
        d = r.to_dict()
        assert isinstance(d["whitened_coordinate"], list)

    def test_index_errors(self, small_data):
        fit = mle.fit_mle(small_data)
        with pytest.raises(IndexOutOfRange):
            run_test(fit, small_data.X, 5)
        with pytest.raises(IndexOutOfRange):
            run_test(fit, small_data.X, -1)

    def test_bad_omega(self, small_data):
        fit = mle.fit_mle(small_data)
        with pytest.raises(DomainError):
            run_test(fit, small_data.X, 0, omega=-1.0)

    @pytest.mark.slow
    def test_mean_near_dof(self):
        s = run_monte_carlo(SimConfig(n=400, p=80, K=2, reps=400, seed=77, omega_mode="known"))
        assert abs(s.mean_T_hd - 2) <= 0.35


class TestOmega:
    def test_orthogonal_column(self):
        rng = np.random.default_rng(0)
        n = 50
        Z = np.linalg.qr(rng.normal(size=(n, 3)))[0]
        X = Z.copy()
        X[:, 0] *= np.sqrt(n - 2)
        assert estimate_omega_jj(X, 0) == pytest.approx(1.0, rel=1e-12)

    def test_from_sigma(self):
        S = gen_sigma_ar1(10, 0.5)
        assert omega_from_sigma(S, 0) == pytest.approx(4 / 3, rel=1e-12)
        assert omega_from_sigma(S, 5) == pytest.approx(5 / 3, rel=1e-12)

    def test_ar1_estimates(self):
        data, _, Sigma = simulated_dataset(2000, 50, 1, seed=13)
        assert estimate_omega_jj(data.X, 49) == pytest.approx(4 / 3, rel=0.1)
        assert estimate_omega_jj(data.X, 25) == pytest.approx(5 / 3, rel=0.1)

    def test_rank_deficient(self):
        X = np.random.default_rng(1).normal(size=(10, 3))
        X[:, 2] = X[:, 0]
        with pytest.raises(RankDeficient):
            estimate_omega_jj(X, 2)


class TestClassical:
    def test_zero_row(self):
        X = np.array([[1.0], [-1.0], [-1.0], [1.0], [0.0]])
        Y = np.eye(2)[[0, 0, 1, 1, 1]]
        fit = mle.fit_mle(Dataset(X, Y))
        stat, p = classical_test(fit, X, 0, omega=1.0)
        assert stat <= 1e-20 and p == 1.0

    def test_low_dimensional_calibration(self):
        pvals = []
        for rep in range(400):
            data, _, Sigma = simulated_dataset(5000, 5, 2, seed=500 + rep)
            fit = mle.fit_mle(data)
            pvals.append(classical_test(fit, data.X, 4, omega=omega_from_sigma(Sigma, 4))[1])
        assert ks_distance(pvals) <= 0.08
