import math

import numpy as np
import pytest

from conftest import loss_fd_check
from gp2bnn.activations import make_activation
from gp2bnn.bnn import default_prior
from gp2bnn.gp import InputSet, KernelSpec, gram
from gp2bnn.grad import NonFiniteLoss, ParamVector, TargetSet, TrainingBatchSpec, loss_and_grad
from gp2bnn.hypernet import HIDDEN_WIDTHS, Hypernetwork
from gp2bnn.metrics import w2_gaussian_and_grad


def gp_target(n=8, lo=-2.0, hi=2.0, kernel=KernelSpec("matern52", 1.0)):
    X = np.linspace(lo, hi, n)[:, None]
    return TargetSet(X, np.zeros(n), gram(kernel, InputSet(X)))


class TestParamVector:
    def test_layout_and_round_trip(self):
        p = default_prior("periodic:2", 8, rng=np.random.default_rng(0))
        pv = ParamVector.from_prior(p)
        assert [n for n, _ in pv.layout][:4] == ["log_sigma_b0", "log_sigma_w0", "log_sigma_bl", "log_sigma_wl"]
        assert pv["eta"].size == 8 and "eta" in pv and "hnet_theta" not in pv
        q = pv.to_prior(p)
        np.testing.assert_allclose(q.sigmas, p.sigmas)
        np.testing.assert_array_equal(q.activation.params, p.activation.params)

    def test_positive_after_exponentiation(self):
        p = default_prior("tanh", 4)
        pv = ParamVector.from_prior(p).with_values([-30.0, 5.0, -2.0, 0.0])
        assert np.all(pv.to_prior(p).sigmas > 0)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(3), (("a", 2),))


class TestLossAndGrad:
    def test_deterministic(self):
        p = default_prior("nn:5:silu", 16, rng=np.random.default_rng(0))
        pv = ParamVector.from_prior(p)
        batch = TrainingBatchSpec([gp_target()], 64, 16, p.activation)
        l1, g1 = loss_and_grad(pv, batch, np.random.default_rng(3))
        l2, g2 = loss_and_grad(pv, batch, np.random.default_rng(3))
        assert l1 == l2 and np.array_equal(g1.values, g2.values)
        assert g1.layout == pv.layout

    def test_degenerate_prior(self):
        p = default_prior("tanh", 16)
        pv = ParamVector.from_prior(p).with_values([0.0, 0.0, -20.0, -20.0])
        t = gp_target()
        loss, _ = loss_and_grad(pv, TrainingBatchSpec([t], 64, 16, p.activation), np.random.default_rng(0))
        # zero-moment model against the target: trace of its covariance over |X|
        assert loss == pytest.approx(np.trace(t.cov) / 8, rel=1e-6)
        assert loss > 0

    @pytest.mark.parametrize("spec", ["relu", "tanh", "identity", "nn:5:silu", "rational:5:4", "pwl:8", "periodic:5"])
    def test_finite_differences(self, spec):
        for probe in range(3):
            err, _ = loss_fd_check(spec, probe)
            assert err < 1e-4

    def test_batch_average_over_sets(self):
        p = default_prior("tanh", 8)
        pv = ParamVector.from_prior(p)
        t1, t2 = gp_target(6), gp_target(6, -1.0, 3.0)
        rng = lambda: np.random.default_rng(5)
        l12, g12 = loss_and_grad(pv, TrainingBatchSpec([t1, t2], 32, 8, p.activation), rng())
        # the second set consumes the stream after the first
        r = rng()
        l1, g1 = loss_and_grad(pv, TrainingBatchSpec([t1], 32, 8, p.activation), r)
        l2, g2 = loss_and_grad(pv, TrainingBatchSpec([t2], 32, 8, p.activation), r)
        assert l12 == pytest.approx((l1 + l2) / 2, rel=1e-14)
        np.testing.assert_allclose(g12.values, (g1.values + g2.values) / 2, rtol=1e-12)

    def test_regularizer_needs_samples(self):
        p = default_prior("tanh", 8)
        batch = TrainingBatchSpec([gp_target()], 32, 8, p.activation, regularizer_weight=0.1)
        with pytest.raises(ValueError):
            loss_and_grad(ParamVector.from_prior(p), batch, np.random.default_rng(0))

    def test_regularizer_gradient_fd(self):
        rng = np.random.default_rng(1)
        X = np.linspace(-2, 2, 6)[:, None]
        samples = rng.multivariate_normal(np.zeros(6), gram(KernelSpec("rbf"), InputSet(X)), 200)
        t = TargetSet.from_samples(X, samples)
        p = default_prior("tanh", 8)
        pv = ParamVector.from_prior(p).with_values([0.1, -0.2, 0.3, 0.2])
        batch = TrainingBatchSpec([t], 64, 8, p.activation, regularizer_weight=0.5)
        _, g = loss_and_grad(pv, batch, np.random.default_rng(2))
        h = 1e-5
        for k in range(4):
            e = np.zeros(4)
            e[k] = h
            up = loss_and_grad(pv.with_values(pv.values + e), batch, np.random.default_rng(2))[0]
            dn = loss_and_grad(pv.with_values(pv.values - e), batch, np.random.default_rng(2))[0]
            assert g.values[k] == pytest.approx((up - dn) / (2 * h), rel=1e-4, abs=1e-7)

    def test_non_finite_raises(self):
        p = default_prior("identity", 8)
        pv = ParamVector.from_prior(p).with_values([0.0, 400.0, 0.0, 0.0])
        with pytest.raises(NonFiniteLoss):
            loss_and_grad(pv, TrainingBatchSpec([gp_target()], 16, 8, p.activation), np.random.default_rng(0))

    def test_mean_gradient_with_frozen_covariance(self):
        rng = np.random.default_rng(3)
        mu1, mu2 = rng.normal(size=6), rng.normal(size=6)
        C = np.eye(6)
        _, g_mean, _ = w2_gaussian_and_grad(mu1, C, mu2, C, normalize=False)
        np.testing.assert_array_equal(g_mean, 2 * (mu1 - mu2))


class TestHypernetwork:
    def test_default_architecture(self):
        hn = Hypernetwork(make_activation("periodic:5"))
        assert hn.hidden == HIDDEN_WIDTHS == (128, 32, 8)
        assert [name for name, _ in hn.heads] == ["log_sigma", "freqs", "amps"]
        assert [size for _, size in hn.heads] == [4, 10, 10]

    def test_other_families_single_eta_head(self):
        assert [n for n, _ in Hypernetwork(make_activation("nn:5:silu")).heads] == ["log_sigma", "eta"]
        assert [n for n, _ in Hypernetwork(make_activation("relu")).heads] == ["log_sigma"]

    def test_shapes_and_positive_scales(self):
        hn = Hypernetwork(make_activation("periodic:5"))
        theta = hn.init_theta(np.random.default_rng(0))
        assert theta.size == hn.n_params
        for gamma in (0.25, 1.0, 4.0):
            ls, eta, _ = hn.forward(theta, gamma)
            assert ls.shape == (4,) and eta.shape == (20,)
            assert np.all(np.exp(ls) > 0)

    def test_init_starts_near_unconditional(self):
        act = make_activation("periodic:5", rng=np.random.default_rng(1))
        hn = Hypernetwork(act)
        theta = hn.init_theta(np.random.default_rng(2), log_sigma0=np.log([1.0, 2.0, 0.5, 1.0]))
        ls, eta, _ = hn.forward(theta, 1.3)
        np.testing.assert_allclose(ls, np.log([1.0, 2.0, 0.5, 1.0]), atol=0.05)
        np.testing.assert_allclose(eta, act.params, atol=0.05)

    def test_wrong_theta_size(self):
        hn = Hypernetwork(make_activation("periodic:2"), hidden=(4,))
        with pytest.raises(ValueError):
            hn.forward(np.zeros(3), 1.0)

    def test_backward_matches_fd(self):
        hn = Hypernetwork(make_activation("periodic:2"), hidden=(6, 4))
        rng = np.random.default_rng(3)
        theta = hn.init_theta(rng, head_scale=1.0)
        gl, ge = rng.normal(size=4), rng.normal(size=8)

        def f(t):
            ls, eta, _ = hn.forward(t, 0.7)
            return float(ls @ gl + eta @ ge)

        _, _, cache = hn.forward(theta, 0.7)
        g = hn.backward(theta, cache, gl, ge)
        h = 1e-6
        for k in rng.choice(theta.size, 25, replace=False):
            e = np.zeros(theta.size)
            e[k] = h
            assert g[k] == pytest.approx((f(theta + e) - f(theta - e)) / (2 * h), rel=1e-5, abs=1e-9)

    def test_conditional_loss_fd(self):
        act = make_activation("periodic:2", rng=np.random.default_rng(4))
        hn = Hypernetwork(act, hidden=(5, 3))
        theta = hn.init_theta(np.random.default_rng(5), head_scale=0.5)
        pv = ParamVector.for_hypernet(theta)
        kernel = KernelSpec("rbf", 1.5)
        batch = TrainingBatchSpec([gp_target(kernel=kernel)], 64, 16, act, gamma=1.5, hypernet=hn)
        _, g = loss_and_grad(pv, batch, np.random.default_rng(6))
        h = 1e-5
        rng = np.random.default_rng(7)
        scale = np.abs(g.values).max()
        for k in rng.choice(theta.size, 15, replace=False):
            e = np.zeros(theta.size)
            e[k] = h
            up = loss_and_grad(pv.with_values(theta + e), batch, np.random.default_rng(6))[0]
            dn = loss_and_grad(pv.with_values(theta - e), batch, np.random.default_rng(6))[0]
            fd = (up - dn) / (2 * h)
            assert abs(g.values[k] - fd) <= 1e-4 * max(abs(fd), 1e-2 * scale)

    def test_conditional_requires_gamma(self):
        hn = Hypernetwork(make_activation("relu"), hidden=(3,))
        batch = TrainingBatchSpec([gp_target()], 16, 8, make_activation("relu"), hypernet=hn)
        with pytest.raises(ValueError):
            loss_and_grad(ParamVector.for_hypernet(hn.init_theta(np.random.default_rng(0))), batch, np.random.default_rng(0))

    def test_log_gamma_input(self):
        # gamma enters through its log, so gamma and 1/gamma are mirror inputs
        hn = Hypernetwork(make_activation("relu"), hidden=(1,))
        theta = np.zeros(hn.n_params)
        theta[0] = 1.0  # first-layer weight
        _, _, (zs, _) = hn.forward(theta, 2.0)
        assert zs[0][0, 0] == pytest.approx(math.log(2.0))
