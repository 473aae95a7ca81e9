import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gp2bnn.gp import FunctionBatch, InputSet, KernelSpec, gram, sample_gp
from gp2bnn.linalg import NotPSD
from gp2bnn.metrics import (
    METRIC_FIELDS,
    DegenerateBatch,
    InputSetMismatch,
    MomentSummary,
    TooFewSamples,
    compare,
    empirical_w1,
    mmd_with_se,
    moment_regularizer,
    moment_regularizer_and_grad,
    moments,
    pointwise_discrepancies,
    w2_gaussian,
    w2_gaussian_and_grad,
)


def batch(values, X=None):
    values = np.asarray(values, float)
    if X is None:
        X = InputSet(np.arange(values.shape[1], dtype=float)[:, None])
    return FunctionBatch(X, values, "gp")


def summary(mean, cov):
    return MomentSummary(np.asarray(mean, float), np.asarray(cov, float), 100)


def w2_general(a, b):
    """Reference through the generic path of the loss-with-gradient routine."""
    return w2_gaussian_and_grad(a.mean, a.covariance, b.mean, b.covariance, normalize=True)[0]


@st.composite
def gaussians(draw, max_dim=6):
    dim = draw(st.integers(1, max_dim))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    out = []
    for _ in range(2):
        B = rng.standard_normal((dim, dim))
        out.append(summary(rng.normal(size=dim), B @ B.T + 0.01 * np.eye(dim)))
    return out


class TestMoments:
    def test_constant_batch(self):
        m = moments(np.full((5, 3), 2.5))
        np.testing.assert_array_equal(m.mean, [2.5] * 3)
        np.testing.assert_array_equal(m.covariance, np.zeros((3, 3)))

    def test_two_rows(self):
        m = moments(np.array([[0.0, 0.0], [2.0, 2.0]]))
        np.testing.assert_allclose(m.mean, [1, 1])
        np.testing.assert_allclose(m.covariance, [[2, 2], [2, 2]])

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            moments(np.zeros((1, 3)))

    def test_gp_covariance_matches_gram(self):
        k = KernelSpec("matern32", 0.7)
        X = InputSet([[-1.0], [0.0], [0.5]])
        n = 100_000
        m = moments(sample_gp(k, X, n, np.random.default_rng(0)))
        G = gram(k, X)
        se = np.sqrt((G**2 + np.outer(np.diag(G), np.diag(G))) / n)
        assert np.all(np.abs(m.covariance - G) < 5 * se)


class TestW2:
    def test_scalar_example(self):
        assert w2_gaussian(summary([0.0], [[1.0]]), summary([1.0], [[4.0]])) == pytest.approx(2.0, abs=1e-12)

    def test_self_distance(self):
        rng = np.random.default_rng(1)
        B = rng.normal(size=(5, 5))
        a = summary(rng.normal(size=5), B @ B.T)
        assert w2_gaussian(a, a) <= 1e-8
        assert w2_general(a, a) <= 1e-8

    def test_diagonal_decomposition(self):
        rng = np.random.default_rng(2)
        ma, mb = rng.normal(size=4), rng.normal(size=4)
        va, vb = rng.uniform(0.1, 3, 4), rng.uniform(0.1, 3, 4)
        want = np.sum((ma - mb) ** 2 + (np.sqrt(va) - np.sqrt(vb)) ** 2)
        a, b = summary(ma, np.diag(va)), summary(mb, np.diag(vb))
        assert w2_gaussian(a, b, normalize=False) == pytest.approx(want, rel=1e-12)
        assert w2_general(a, b) * 4 == pytest.approx(want, rel=1e-10)

    def test_normalization(self):
        rng = np.random.default_rng(3)
        B = rng.normal(size=(3, 3))
        a, b = summary(np.zeros(3), B @ B.T), summary(np.ones(3), np.eye(3))
        assert w2_gaussian(a, b) == pytest.approx(w2_gaussian(a, b, normalize=False) / 3, rel=1e-14)

    def test_dim_mismatch(self):
        with pytest.raises(InputSetMismatch):
            w2_gaussian(summary([0.0], [[1.0]]), summary([0.0, 0.0], np.eye(2)))

    def test_not_psd(self):
        bad = summary([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(NotPSD):
            w2_gaussian(bad, summary([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]]))

    @settings(max_examples=60, deadline=None)
    @given(gaussians())
    def test_symmetric_and_nonnegative(self, pair):
        a, b = pair
        ab, ba = w2_gaussian(a, b), w2_gaussian(b, a)
        assert ab >= 0
        assert ab == pytest.approx(ba, abs=1e-8, rel=1e-8)

    @settings(max_examples=60, deadline=None)
    @given(gaussians())
    def test_general_path_agrees(self, pair):
        a, b = pair
        assert w2_general(a, b) == pytest.approx(w2_gaussian(a, b), abs=1e-8, rel=1e-8)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 5), st.floats(0.01, 5))
    def test_scalar_closed_form(self, m1, m2, s1, s2):
        got = w2_gaussian(summary([m1], [[s1 * s1]]), summary([m2], [[s2 * s2]]))
        assert got == pytest.approx((m1 - m2) ** 2 + (s1 - s2) ** 2, abs=1e-10)

    def test_mean_gradient_is_twice_difference(self):
        rng = np.random.default_rng(4)
        ma, mb = rng.normal(size=5), rng.normal(size=5)
        B = rng.normal(size=(5, 5))
        _, gm, _ = w2_gaussian_and_grad(ma, B @ B.T, mb, np.eye(5), normalize=False)
        np.testing.assert_allclose(gm, 2 * (ma - mb), rtol=1e-15)

    def test_covariance_gradient_fd(self):
        rng = np.random.default_rng(5)
        n = 4
        B1, B2 = rng.normal(size=(n, n)), rng.normal(size=(n, n))
        Sa, Sb = B1 @ B1.T + 0.1 * np.eye(n), B2 @ B2.T + 0.1 * np.eye(n)
        mu = np.zeros(n)
        _, _, G = w2_gaussian_and_grad(mu, Sa, mu, Sb)
        h = 1e-6
        for i in range(n):
            for j in range(i, n):
                E = np.zeros((n, n))
                E[i, j] = E[j, i] = h
                fd = (w2_gaussian_and_grad(mu, Sa + E, mu, Sb)[0] - w2_gaussian_and_grad(mu, Sa - E, mu, Sb)[0]) / (2 * h)
                analytic = G[i, j] * (1 if i == j else 2)
                assert analytic == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestMomentRegularizer:
    def test_identical(self):
        a = np.random.default_rng(0).normal(size=(50, 4))
        assert moment_regularizer(a, a) == 0.0

    def test_doubling(self):
        a = np.random.default_rng(1).gamma(2.0, size=(200, 3))
        var = np.var(a)
        assert moment_regularizer(a, 2 * a) == pytest.approx((var - 4 * var) ** 2, rel=1e-10)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(4000, 5))
        b = rng.normal(size=(4000, 5)) + 3.0
        assert moment_regularizer(a, b) < 0.01

    def test_degenerate(self):
        with pytest.raises(DegenerateBatch):
            moment_regularizer(np.ones((4, 2)), np.random.default_rng(0).normal(size=(4, 2)))

    def test_gradient_fd(self):
        rng = np.random.default_rng(3)
        fa, fb = rng.normal(size=(6, 3)), rng.gamma(2.0, size=(6, 3))
        _, g = moment_regularizer_and_grad(fa, fb)
        h = 1e-6
        for idx in [(0, 0), (2, 1), (5, 2)]:
            e = np.zeros_like(fa)
            e[idx] = h
            fd = (moment_regularizer(fa + e, fb) - moment_regularizer(fa - e, fb)) / (2 * h)
            assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


class TestEmpiricalW1:
    def test_hand_example(self):
        assert empirical_w1(batch([[0.0], [1.0]]), batch([[1.0], [2.0]])) == pytest.approx(1.0)

    def test_identical_and_permuted(self):
        a = np.random.default_rng(0).normal(size=(30, 4))
        assert empirical_w1(batch(a), batch(a)) == 0.0
        assert empirical_w1(batch(a), batch(a[::-1])) == 0.0

    def test_mismatch(self):
        with pytest.raises(InputSetMismatch):
            empirical_w1(batch(np.zeros((3, 2))), batch(np.zeros((3, 3))))

    def test_subsamples_larger(self):
        a = np.random.default_rng(1).normal(size=(10, 2))
        assert empirical_w1(batch(a[:5]), batch(a)) == 0.0


class TestMMD:
    def test_identical_near_zero(self):
        a = batch(np.random.default_rng(0).normal(size=(300, 2)))
        for kernel in ("linear", "poly", "rbf"):
            v, se, _ = mmd_with_se(a, a, kernel)
            assert abs(v) <= 3 * se + 1e-12

    def test_linear_is_mean_gap(self):
        rng = np.random.default_rng(1)
        ma, mb = np.array([0.5, -0.3]), np.array([0.0, 0.4])
        a, b = batch(rng.normal(size=(2000, 2)) + ma), batch(rng.normal(size=(2000, 2)) + mb)
        v, se, _ = mmd_with_se(a, b, "linear")
        assert abs(v - np.sum((ma - mb) ** 2)) < 3 * se

    def test_rbf_separated(self):
        rng = np.random.default_rng(2)
        a, b = batch(rng.normal(size=(500, 1))), batch(rng.normal(size=(500, 1)) + 5)
        v, se, _ = mmd_with_se(a, b, "rbf")
        assert v > 10 * se > 0

    def test_unknown_kernel(self):
        a = batch(np.zeros((3, 1)) + np.arange(3)[:, None])
        with pytest.raises(ValueError):
            mmd_with_se(a, a, "laplace")


class TestPointwise:
    def test_identical(self):
        a = batch(np.random.default_rng(0).normal(size=(20, 3)))
        assert all(v == 0 for v in pointwise_discrepancies(a, a).values())

    def test_shift(self):
        a = np.random.default_rng(1).normal(size=(20, 3))
        d = pointwise_discrepancies(batch(a + 1), batch(a))
        assert d["mean_mse"] == pytest.approx(1.0) and d["mean_l1"] == pytest.approx(1.0)
        assert d["median_l2"] == pytest.approx(1.0)

    def test_two_gp_batches(self):
        k, X = KernelSpec("rbf"), InputSet.grid(-2, 2, 8)
        a = sample_gp(k, X, 100_000, np.random.default_rng(2))
        b = sample_gp(k, X, 100_000, np.random.default_rng(3))
        assert pointwise_discrepancies(a, b)["mean_mse"] < 1e-3


class TestCompare:
    def test_fields_and_meta(self):
        rng = np.random.default_rng(0)
        X = InputSet.grid(-1, 1, 5)
        r = compare(FunctionBatch(X, rng.normal(size=(64, 5)), "bnn"), FunctionBatch(X, rng.normal(size=(64, 5)), "gp"))
        assert tuple(r.values()) == METRIC_FIELDS
        assert all(math.isfinite(v) for v in r.values().values())
        assert r.meta["poly_kernel"] and r.meta["rbf_bandwidth"] > 0

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        X = InputSet.grid(-1, 1, 4)
        A, B = rng.normal(size=(40, 4)), rng.normal(size=(40, 4)) * 1.3
        p = rng.permutation(40)
        r1 = compare(FunctionBatch(X, A, "bnn"), FunctionBatch(X, B, "gp")).values()
        r2 = compare(FunctionBatch(X, A[p], "bnn"), FunctionBatch(X, B[p], "gp")).values()
        for k in METRIC_FIELDS:
            assert r1[k] == pytest.approx(r2[k], rel=1e-9, abs=1e-12)
