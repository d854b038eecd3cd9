import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from kfa import kernels
from kfa.kernels import KernelConfig, center_kernel, center_test_kernel, compute_kernel

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def rows(n_max=8, d_max=4):
    return st.integers(1, n_max).flatmap(
        lambda n: st.integers(1, d_max).flatmap(lambda d: hnp.arrays(float, (n, d), elements=finite)))


class TestConfig:
    def test_rbf_needs_positive_gamma(self):
        with pytest.raises(ValueError):
            KernelConfig(kind="rbf", gamma=0.0)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            KernelConfig(kind="ard_rbf", lam=np.array([1.0, -0.1]))

    def test_polynomial_degree(self):
        with pytest.raises(ValueError):
            KernelConfig(kind="polynomial", degree=0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            KernelConfig(kind="sigmoid")

    def test_dict_round_trip(self):
        cfg = KernelConfig(kind="ard_rbf", lam=np.array([0.5, 2.0]), center=False)
        back = KernelConfig.from_dict(cfg.to_dict())
        assert back.kind == cfg.kind and back.center is False
        np.testing.assert_array_equal(back.lam, cfg.lam)

    def test_lambda_key_alias(self):
        cfg = KernelConfig.from_dict({"kind": "ard_rbf", "lambda": [1.0, 2.0]})
        np.testing.assert_array_equal(cfg.lam, [1.0, 2.0])


class TestComputeKernel:
    def test_rbf_self_similarity_is_one(self):
        x = np.array([[0.3, -1.2, 4.0]])
        assert compute_kernel(x, x, KernelConfig(kind="rbf", gamma=0.7))[0, 0] == 1.0

    def test_linear_orthogonal(self):
        K = compute_kernel(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), KernelConfig(kind="linear"))
        assert K[0, 0] == 0.0

    def test_rbf_hand_value(self):
        K = compute_kernel(np.array([[0.0, 0.0]]), np.array([[1.0, 1.0]]), KernelConfig(kind="rbf", gamma=0.5))
        assert K[0, 0] == pytest.approx(np.exp(-1.0), abs=1e-15)
        assert K[0, 0] == pytest.approx(0.367879, abs=1e-6)

    def test_polynomial(self):
        a, b = np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]])
        K = compute_kernel(a, b, KernelConfig(kind="polynomial", degree=3, coef0=1.0))
        assert K[0, 0] == pytest.approx((1 * 3 + 2 * -1 + 1.0) ** 3)

    def test_column_mismatch(self):
        with pytest.raises(ValueError):
            compute_kernel(np.zeros((2, 3)), np.zeros((2, 2)), KernelConfig(kind="linear"))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            compute_kernel(np.array([[np.nan, 1.0]]), None, KernelConfig(kind="linear"))

    def test_unresolved_gamma(self):
        with pytest.raises(ValueError):
            compute_kernel(np.zeros((2, 2)), None, KernelConfig(kind="rbf"))

    def test_ard_lambda_length(self):
        with pytest.raises(ValueError):
            compute_kernel(np.zeros((2, 3)), None, KernelConfig(kind="ard_rbf", lam=np.ones(2)))

    def test_precomputed_passes_rows_through(self):
        K = np.array([[1.0, 0.2], [0.2, 1.0]])
        np.testing.assert_array_equal(compute_kernel(K, K, KernelConfig(kind="precomputed")), K)
        with pytest.raises(ValueError):
            compute_kernel(np.ones((2, 3)), None, KernelConfig(kind="precomputed"))

    @settings(max_examples=60, deadline=None)
    @given(rows(), st.sampled_from(["linear", "rbf", "ard_rbf", "polynomial"]))
    def test_symmetric(self, X, kind):
        cfg = kernels.resolve(KernelConfig(kind=kind, gamma=0.3 if kind == "rbf" else None), X)
        K = compute_kernel(X, X, cfg)
        np.testing.assert_allclose(K, K.T, atol=1e-12, rtol=0)

    @settings(max_examples=60, deadline=None)
    @given(rows(), st.sampled_from(["linear", "rbf", "ard_rbf"]))
    def test_psd(self, X, kind):
        cfg = kernels.resolve(KernelConfig(kind=kind, gamma=0.3 if kind == "rbf" else None), X)
        ev = np.linalg.eigvalsh(compute_kernel(X, X, cfg))
        assert ev.min() >= -1e-8 * max(abs(ev).max(), 1e-300)

    @settings(max_examples=40, deadline=None)
    @given(rows(), st.floats(1e-3, 5.0))
    def test_ard_with_uniform_lambda_is_rbf(self, X, g):
        K1 = compute_kernel(X, X, KernelConfig(kind="rbf", gamma=g))
        K2 = compute_kernel(X, X, KernelConfig(kind="ard_rbf", lam=np.full(X.shape[1], g)))
        np.testing.assert_allclose(K1, K2, atol=1e-12, rtol=0)


class TestDefaultGamma:
    def test_median_heuristic(self):
        X = np.array([[0.0], [1.0], [3.0]])
        # pairwise squared distances 1, 9, 4 -> median 4, D = 1
        assert kernels.default_gamma(X) == pytest.approx(0.25)

    def test_degenerate_rows(self):
        assert kernels.default_gamma(np.zeros((4, 2))) == pytest.approx(0.5)

    def test_resolve_fills_lambda(self):
        X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        cfg = kernels.resolve(KernelConfig(kind="ard_rbf"), X)
        np.testing.assert_allclose(cfg.lam, kernels.default_gamma(X))


class TestCentering:
    def test_all_ones_centers_to_zero(self):
        Kc, _ = center_kernel(np.ones((3, 3)))
        np.testing.assert_array_equal(Kc, np.zeros((3, 3)))

    def test_identity(self):
        Kc, _ = center_kernel(np.eye(2))
        np.testing.assert_allclose(Kc, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((6, 3))
        Kc, _ = center_kernel(A @ A.T)
        np.testing.assert_allclose(center_kernel(Kc)[0], Kc, atol=1e-12)

    def test_non_square(self):
        with pytest.raises(ValueError):
            center_kernel(np.ones((2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(rows(n_max=10))
    def test_row_sums_vanish(self, X):
        Kc, _ = center_kernel(compute_kernel(X, X, KernelConfig(kind="rbf", gamma=0.5)))
        np.testing.assert_allclose(Kc.sum(1), 0.0, atol=1e-8)

    def test_stats_reproduce_training_kernel_exactly(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((7, 3))
        K = compute_kernel(X, X, KernelConfig(kind="rbf", gamma=0.4))
        Kc, stats = center_kernel(K)
        np.testing.assert_array_equal(K - stats.train_row_means[:, None] - stats.train_row_means[None, :]
                                      + stats.train_grand_mean, Kc)

    def test_training_row_as_test_row(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((6, 2))
        K = compute_kernel(X, X, KernelConfig(kind="rbf", gamma=0.8))
        Kc, stats = center_kernel(K)
        np.testing.assert_allclose(center_test_kernel(K, stats), Kc, atol=1e-12)
        np.testing.assert_allclose(center_test_kernel(K[3:4], stats), Kc[3:4], atol=1e-12)

    def test_constant_row_against_ones(self):
        _, stats = center_kernel(np.ones((3, 3)))
        np.testing.assert_allclose(center_test_kernel(np.full((1, 3), 1.0), stats), 0.0, atol=1e-15)

    def test_column_mismatch(self):
        _, stats = center_kernel(np.ones((3, 3)))
        with pytest.raises(ValueError):
            center_test_kernel(np.ones((1, 4)), stats)

    def test_augmented_brute_force(self):
        # For a kernel whose rows all have the same mean, centering a test row
        # with training statistics equals centering the (N+1)-augmented kernel
        # with a training-only mean operator, restricted to the test row.
        rng = np.random.default_rng(3)
        K = np.full((3, 3), 0.5) + np.diag([0.5, 0.5, 0.5])  # constant row mean 2/3
        kt = rng.uniform(0, 1, (1, 3))
        _, stats = center_kernel(K)
        aug = np.zeros((4, 4))
        aug[:3, :3] = K
        aug[3, :3] = kt
        aug[:3, 3] = kt
        n = 3
        # C = (I - 1 e^T / n) with e selecting training columns
        E = np.zeros((4, 4))
        E[:, :3] = 1.0 / n
        C = np.eye(4) - E
        brute = (C @ aug @ C.T)[3, :3]
        np.testing.assert_allclose(center_test_kernel(kt, stats)[0], brute, atol=1e-12)


class TestArdGradient:
    def test_identical_rows_give_zero(self):
        X = np.tile([[1.0, -2.0, 0.5]], (4, 1))
        np.testing.assert_array_equal(kernels.ard_rbf_gradient(X, np.ones(3)), 0.0)

    def test_single_row(self):
        np.testing.assert_array_equal(kernels.ard_rbf_gradient(np.array([[1.0, 2.0]]), np.ones(2)), 0.0)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            kernels.ard_rbf_gradient(np.zeros((2, 2)), np.array([1.0, -1.0]))

    def _fd(self, X, lam, h=1e-6):
        out = np.empty(X.shape[:1] * 2 + lam.shape)
        for d in range(lam.size):
            up, dn = lam.copy(), lam.copy()
            up[d] += h
            dn[d] -= h
            out[:, :, d] = (compute_kernel(X, X, KernelConfig(kind="ard_rbf", lam=up))
                            - compute_kernel(X, X, KernelConfig(kind="ard_rbf", lam=dn))) / (2 * h)
        return out

    def test_matches_finite_differences_4x3(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((4, 3))
        lam = rng.uniform(0.2, 1.5, 3)
        g = kernels.ard_rbf_gradient(X, lam)
        fd = self._fd(X, lam)
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)

    @pytest.mark.parametrize("seed", range(20))
    def test_contraction_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        n, d = rng.integers(2, 9), rng.integers(1, 5)
        X = rng.standard_normal((n, d))
        lam = rng.uniform(0.05, 2.0, d)
        W = rng.standard_normal((n, n))
        g = kernels.ard_rbf_gradient(X, lam, weights=W)
        fd = np.einsum("nu,nud->d", W, self._fd(X, lam))
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)

    def test_contraction_equals_full_tensor(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((6, 3))
        lam = rng.uniform(0.1, 1.0, 3)
        W = rng.standard_normal((6, 6))
        full = kernels.ard_rbf_gradient(X, lam)
        np.testing.assert_allclose(kernels.ard_rbf_gradient(X, lam, weights=W),
                                   np.einsum("nu,nud->d", W, full), rtol=1e-12, atol=1e-12)
