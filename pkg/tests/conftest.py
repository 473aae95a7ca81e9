import math

import numpy as np
from scipy import integrate

from gp2bnn.activations import Activation


class Transformed(Activation):
    """x -> scale * base(sign * x); used for symmetry checks."""

    def __init__(self, base: Activation, scale: float = 1.0, sign: float = 1.0):
        super().__init__(())
        self.base, self.scale, self.sign = base, scale, sign

    @property
    def n_params(self):
        return 0

    @property
    def spec(self):
        return f"{self.scale}*{self.base.spec}({self.sign}x)"

    def value(self, x):
        return self.scale * self.base.value(self.sign * np.asarray(x, float))

    def deriv(self, x):
        return self.scale * self.sign * self.base.deriv(self.sign * np.asarray(x, float))

    def vjp(self, x, g):
        return g * self.deriv(x), np.zeros(0)


def relu_expectation(x, x2, sigma_b0, sigma_w0):
    """E[relu(u) relu(v)] for the hidden pre-activations at x, x2, by 2-D quadrature."""
    var_u = sigma_b0**2 + sigma_w0**2 * x * x
    var_v = sigma_b0**2 + sigma_w0**2 * x2 * x2
    cov = sigma_b0**2 + sigma_w0**2 * x * x2
    C = np.array([[var_u, cov], [cov, var_v]])
    if np.linalg.det(C) <= 1e-12 * var_u * var_v:
        # rank one: (u, v) = (a z, b z) with z standard normal
        a, b = math.sqrt(var_u), math.copysign(math.sqrt(var_v), cov)
        f = lambda z: max(a * z, 0.0) * max(b * z, 0.0) * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        return integrate.quad(f, -12, 12, points=[0.0], epsabs=1e-12)[0]
    Ci = np.linalg.inv(C)
    norm = 1.0 / (2 * math.pi * math.sqrt(np.linalg.det(C)))

    def density(v, u):
        q = Ci[0, 0] * u * u + 2 * Ci[0, 1] * u * v + Ci[1, 1] * v * v
        return u * v * norm * math.exp(-0.5 * q)

    su, sv = math.sqrt(var_u), math.sqrt(var_v)
    # relu(u) relu(v) vanishes outside the positive quadrant
    return integrate.dblquad(density, 0, 12 * su, 0, 12 * sv, epsabs=1e-11, epsrel=1e-9)[0]


def arccos_relu(x, x2, sigma_b0, sigma_w0):
    """Closed form of the same expectation (first-order arc-cosine kernel)."""
    su = math.sqrt(sigma_b0**2 + sigma_w0**2 * x * x)
    sv = math.sqrt(sigma_b0**2 + sigma_w0**2 * x2 * x2)
    c = np.clip((sigma_b0**2 + sigma_w0**2 * x * x2) / (su * sv), -1, 1)
    t = math.acos(c)
    return su * sv / (2 * math.pi) * (math.sin(t) + (math.pi - t) * c)


def kink_locations(act):
    """Points where ``act`` is not differentiable, with their speed per unit parameter change."""
    from gp2bnn.activations import Fixed, PiecewiseLinear, Rational

    if isinstance(act, Fixed) and act.name == "relu":
        return np.zeros(1), np.zeros(1)
    if isinstance(act, PiecewiseLinear):
        return act.params[: act.n].copy(), np.ones(act.n)
    if isinstance(act, Rational):
        d = act.params[act.p + 1 :]
        roots = np.roots(np.r_[d[::-1], 0.0])
        r = roots[np.abs(roots.imag) < 1e-9].real
        dQ = np.polynomial.polynomial.polyval(r, np.arange(1, d.size + 1) * d)
        speed = np.array([max(abs(x) ** k for k in range(1, d.size + 1)) for x in r]) / np.maximum(np.abs(dQ), 1e-300)
        return r, speed
    return np.zeros(0), np.zeros(0)


def loss_fd_check(spec, probe, width=16, n_inputs=8, mc_samples=64, h_max=1e-5, seed=7):
    """Largest relative gap between the analytic loss gradient and central differences.

    The relative error of each coordinate is taken against max(|fd_k|, 1e-2 * max|fd|).
    For kinked activations the step is shrunk so no preactivation or kink crosses
    another during the difference.
    """
    from gp2bnn.bnn import default_prior, draw_noise
    from gp2bnn.gp import KernelSpec, gram
    from gp2bnn.gp import InputSet as IS
    from gp2bnn.grad import ParamVector, TargetSet, TrainingBatchSpec, loss_and_grad

    rng = np.random.default_rng([probe, 99])
    p = default_prior(spec, width, rng=rng)
    pv = ParamVector.from_prior(p)
    pv = pv.with_values(pv.values + 0.3 * rng.standard_normal(pv.values.size))
    X = np.linspace(-2.0, 2.0, n_inputs)[:, None]
    target = TargetSet(X, np.zeros(n_inputs), gram(KernelSpec("matern52", 1.0), IS(X)))
    batch = TrainingBatchSpec([target], mc_samples, width, p.activation)

    h = h_max
    kinks, speed = kink_locations(pv.to_prior(p).activation)
    if kinks.size:
        q = pv.to_prior(p)
        nz = draw_noise(mc_samples, width, 1, np.random.default_rng(seed))
        pre = (q.sigma_w0 * np.einsum("shi,ni->shn", nz.w0, X) + q.sigma_b0 * nz.b0[:, :, None]).ravel()
        gap = np.min(np.abs(pre[:, None] - kinks[None, :]))
        h = min(h_max, 0.25 * gap / (np.abs(pre).max() + speed.max()))

    _, g = loss_and_grad(pv, batch, np.random.default_rng(seed))
    fd = np.empty(pv.values.size)
    for k in range(pv.values.size):
        e = np.zeros(pv.values.size)
        e[k] = h
        up = loss_and_grad(pv.with_values(pv.values + e), batch, np.random.default_rng(seed))[0]
        dn = loss_and_grad(pv.with_values(pv.values - e), batch, np.random.default_rng(seed))[0]
        fd[k] = (up - dn) / (2 * h)
    den = np.maximum(np.abs(fd), 1e-2 * np.abs(fd).max())
    return float(np.max(np.abs(g.values - fd) / den)), h


def conjugate_problem(seed=0, n=20, noise_variance=0.09):
    """Bayesian linear regression written as a width-1 identity-activation BNN.

    The hidden layer is frozen at w0 = 1, b0 = 0, so the output layer sees the
    raw inputs and its posterior is Gaussian with closed-form moments.
    Returns ``(prior, data, lik, init, frozen, post_mean, post_var)``.
    """
    from gp2bnn.activations import Fixed
    from gp2bnn.bnn import PriorParams
    from gp2bnn.posterior import Dataset, LikelihoodSpec, prior_std

    rng = np.random.default_rng(seed)
    prior = PriorParams(1, 1, 1.0, 1.0, 1.0, 1.5, Fixed("identity"))
    x = rng.uniform(-2, 2, n)
    y = 1.2 * x + 0.8 + math.sqrt(noise_variance) * rng.standard_normal(n)
    data, lik = Dataset(x[:, None], y), LikelihoodSpec.gaussian(noise_variance)
    init = np.array([1.0, 0.0, 0.0, 0.0])
    frozen = np.array([True, True, False, False])
    Phi = np.column_stack([x, np.ones(n)])
    prec = np.diag(1.0 / prior_std(prior)[2:] ** 2) + Phi.T @ Phi / noise_variance
    cov = np.linalg.inv(prec)
    mean = cov @ Phi.T @ y / noise_variance
    return prior, data, lik, init, frozen, mean, np.diag(cov)
