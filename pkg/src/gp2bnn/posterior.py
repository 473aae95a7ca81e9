"""HMC over the weights of a one-hidden-layer BNN carrying a (transferred) prior.

Weight vector layout: ``[w0 (H*I, row-major H x I), b0 (H), w1 (H), b1 (1)]``.
Prior standard deviations are ``sigma_w0, sigma_b0, sigma_wl / sqrt(H), sigma_bl``,
so the network ``f(x) = w1 . phi(w0 x + b0) + b1`` has exactly the functional
prior sampled by :func:`gp2bnn.bnn.sample_functions`.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .bnn import PriorParams
from .gp import InputSet, KernelSpec, sample_gp

log = logging.getLogger(__name__)

SCHEMA_LINE = "# gp2bnn-schema: 1"
DIVERGENCE_ENERGY = 1000.0
MAX_DIVERGENT_FRACTION = 0.05


class NonFinite(FloatingPointError):
    pass


class Diverged(RuntimeError):
    def __init__(self, msg, chain=None):
        super().__init__(msg)
        self.chain = chain


class SchemaError(ValueError):
    pass


# --------------------------------------------------------------------------- data


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    f: Optional[np.ndarray] = None  # noise-free latent values, when known

    def __post_init__(self):
        self.X = np.asarray(self.X, float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y, float).ravel()
        if self.X.shape[0] != self.y.size:
            raise SchemaError("X and y have different lengths")
        if self.f is not None:
            self.f = np.asarray(self.f, float).ravel()
            if self.f.size != self.y.size:
                raise SchemaError("f and y have different lengths")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @classmethod
    def empty(cls, dim: int = 1) -> "Dataset":
        return cls(np.zeros((0, dim)), np.zeros(0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(SCHEMA_LINE + "\n")
        w = csv.writer(buf, lineterminator="\n")
        head = [f"x_{i + 1}" for i in range(self.dim)] + ["y"] + (["f"] if self.f is not None else [])
        w.writerow(head)
        for i in range(self.n):
            row = list(self.X[i]) + [self.y[i]] + ([self.f[i]] if self.f is not None else [])
            w.writerow([format(v, ".17g") for v in row])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "Dataset":
        lines = text.splitlines()
        body = []
        for ln in lines:
            if ln.startswith("#"):
                if ln.startswith("# gp2bnn-schema:") and ln.strip() != SCHEMA_LINE:
                    raise SchemaError(f"unsupported schema line {ln.strip()!r}")
                continue
            if ln.strip():
                body.append(ln)
        if not body:
            raise SchemaError("dataset has no header")
        rows = list(csv.reader(body))
        head = [h.strip() for h in rows[0]]
        xs = [h for h in head if h.startswith("x_")]
        expected = [f"x_{i + 1}" for i in range(len(xs))]
        if not xs or xs != expected or "y" not in head:
            raise SchemaError(f"header must be x_1..x_d, y[, f]; got {head}")
        extra = set(head) - set(xs) - {"y", "f"}
        if extra:
            raise SchemaError(f"unknown columns {sorted(extra)}")
        try:
            data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(head))
        except ValueError as exc:
            raise SchemaError(f"non-numeric value: {exc}") from None
        if not np.all(np.isfinite(data)):
            raise SchemaError("dataset contains non-finite values")
        col = {h: i for i, h in enumerate(head)}
        X = data[:, [col[h] for h in xs]]
        f = data[:, col["f"]] if "f" in col else None
        return cls(X, data[:, col["y"]], f)

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_csv(Path(path).read_text())


def regression_demo(
    rng: np.random.Generator,
    n_per_cluster: int = 20,
    centers=(-1.5, 1.5),
    half_width: float = 0.75,
    noise_variance: float = 0.1,
    n_test: int = 200,
    lengthscale: float = 0.6,
):
    """Two-cluster 1-D regression task drawn from a GP RBF(0.6, 1) with Gaussian noise.

    One latent function is drawn jointly on train and test inputs; test inputs
    come from the same cluster distribution. Returns ``(train, test)`` with the
    latent values in ``f``.
    """
    def draw(n_each):
        return np.concatenate([rng.uniform(c - half_width, c + half_width, n_each) for c in centers])

    x_tr = draw(n_per_cluster)
    x_te = draw(max(1, n_test // len(centers)))
    x_all = np.concatenate([x_tr, x_te])[:, None]
    k = KernelSpec("rbf", lengthscale, 1.0)
    f = sample_gp(k, InputSet(x_all), 1, rng).values[0]
    y = f + math.sqrt(noise_variance) * rng.standard_normal(f.size)
    n = x_tr.size
    return Dataset(x_all[:n], y[:n], f[:n]), Dataset(x_all[n:], y[n:], f[n:])


def two_moons(rng: np.random.Generator, n: int = 100, noise: float = 0.1) -> Dataset:
    """Two interleaving half circles, labels in {0, 1}."""
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0, math.pi, n0)
    t1 = rng.uniform(0, math.pi, n1)
    a = np.column_stack([np.cos(t0), np.sin(t0)])
    b = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    X = np.vstack([a, b]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n0), np.ones(n1)])
    perm = rng.permutation(n)
    return Dataset(X[perm], y[perm])


# ------------------------------------------------------------------- likelihood


@dataclass(frozen=True)
class LikelihoodSpec:
    kind: str = "gaussian"  # "gaussian" | "bernoulli_logit"
    noise_variance: Optional[float] = 0.1

    def __post_init__(self):
        if self.kind not in ("gaussian", "bernoulli_logit"):
            raise ValueError(f"unknown likelihood {self.kind!r}")
        if self.kind == "gaussian":
            if self.noise_variance is None or not self.noise_variance > 0:
                raise ValueError("gaussian likelihood needs noise_variance > 0")

    @classmethod
    def gaussian(cls, noise_variance: float = 0.1) -> "LikelihoodSpec":
        return cls("gaussian", float(noise_variance))

    @classmethod
    def bernoulli(cls) -> "LikelihoodSpec":
        return cls("bernoulli_logit", None)

    def log_lik_and_grad(self, f: np.ndarray, y: np.ndarray):
        """Sum of per-point log-likelihoods and its gradient w.r.t. ``f``."""
        if self.kind == "gaussian":
            v = self.noise_variance
            r = y - f
            ll = -0.5 * np.sum(r * r) / v - 0.5 * y.size * math.log(2 * math.pi * v)
            return float(ll), r / v
        ll = np.sum(y * log_expit(f) + (1 - y) * log_expit(-f))
        return float(ll), y - expit(f)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "noise_variance": self.noise_variance}


# -------------------------------------------------------------------- network


def n_weights(prior: PriorParams) -> int:
    return prior.n_weights


def prior_std(prior: PriorParams) -> np.ndarray:
    H, I = prior.width, prior.input_dim
    return np.concatenate(
        [
            np.full(H * I, prior.sigma_w0),
            np.full(H, prior.sigma_b0),
            np.full(H, prior.sigma_wl / math.sqrt(H)),
            [prior.sigma_bl],
        ]
    )


def unpack(weights: np.ndarray, prior: PriorParams):
    H, I = prior.width, prior.input_dim
    w = np.asarray(weights, float)
    if w.size != prior.n_weights:
        raise ValueError(f"weight vector has length {w.size}, expected {prior.n_weights}")
    k = H * I
    return w[:k].reshape(H, I), w[k : k + H], w[k + H : k + 2 * H], w[-1]


def network(weights: np.ndarray, prior: PriorParams, X: np.ndarray) -> np.ndarray:
    """Network outputs; ``weights`` may be a single vector or a stack (D, n_weights)."""
    W = np.atleast_2d(np.asarray(weights, float))
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    H, I = prior.width, prior.input_dim
    k = H * I
    w0 = W[:, :k].reshape(-1, H, I)
    b0 = W[:, k : k + H]
    w1 = W[:, k + H : k + 2 * H]
    b1 = W[:, -1]
    h = np.einsum("dhi,ni->dhn", w0, X) + b0[:, :, None]
    out = np.einsum("dh,dhn->dn", w1, prior.activation.value(h)) + b1[:, None]
    return out[0] if np.ndim(weights) == 1 else out


def sample_prior_weights(prior: PriorParams, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n, prior.n_weights)) * prior_std(prior)


def log_posterior(weights, prior: PriorParams, data: Dataset, lik: LikelihoodSpec):
    """``(log p(w) + log p(y | X, w), gradient)`` with Gaussian weight priors."""
    w = np.asarray(weights, float)
    std = prior_std(prior)
    if w.size != std.size:
        raise ValueError(f"weight vector has length {w.size}, expected {std.size}")
    z = w / std
    logp = float(-0.5 * np.sum(z * z) - np.sum(np.log(std)) - 0.5 * w.size * math.log(2 * math.pi))
    grad = -z / std
    if data.n:
        w0, b0, w1, b1 = unpack(w, prior)
        h = w0 @ data.X.T + b0[:, None]  # (H, n)
        a = prior.activation.value(h)
        f = w1 @ a + b1
        ll, gf = lik.log_lik_and_grad(f, data.y)
        logp += ll
        gh = prior.activation.deriv(h) * (w1[:, None] * gf[None, :])
        g = np.concatenate([(gh @ data.X).ravel(), gh.sum(axis=1), a @ gf, [gf.sum()]])
        grad = grad + g
    if not (math.isfinite(logp) and np.all(np.isfinite(grad))):
        raise NonFinite("log posterior or gradient is not finite")
    return logp, grad


# ----------------------------------------------------------------------- HMC


@dataclass(frozen=True)
class HMCConfig:
    n_chains: int = 4
    n_warmup: int = 500
    n_samples: int = 1000
    leapfrog_steps: int = 32
    step_size: float = 0.01
    target_accept: float = 0.8
    seed: int = 0

    def __post_init__(self):
        for name in ("n_chains", "n_warmup", "n_samples", "leapfrog_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PosteriorChain:
    draws: np.ndarray  # (chains, samples, params)
    acceptance: np.ndarray  # per-chain accepted fraction after warmup
    accept_prob: np.ndarray  # per-chain mean Metropolis probability after warmup
    divergences: np.ndarray  # per-chain post-warmup divergent transitions
    step_sizes: np.ndarray
    config: HMCConfig = field(default_factory=HMCConfig)

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.acceptance))

    @property
    def n_divergences(self) -> int:
        return int(np.sum(self.divergences))

    @property
    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(SCHEMA_LINE + "\n")
        P = self.draws.shape[-1]
        buf.write(",".join(["chain", "draw"] + [f"w_{i}" for i in range(P)]) + "\n")
        for c in range(self.draws.shape[0]):
            for d in range(self.draws.shape[1]):
                buf.write(f"{c},{d}," + ",".join(format(v, ".17g") for v in self.draws[c, d]) + "\n")
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "n_chains": int(self.draws.shape[0]),
            "n_samples": int(self.draws.shape[1]),
            "acceptance_rate": self.acceptance_rate,
            "acceptance_per_chain": self.acceptance.tolist(),
            "mean_accept_prob": float(np.mean(self.accept_prob)),
            "divergences": self.n_divergences,
            "step_sizes": self.step_sizes.tolist(),
        }


def leapfrog(q, p, grad, eps, n_steps, inv_mass, logp_fn):
    """``n_steps`` leapfrog steps for H = -log p(q) + p' M^-1 p / 2."""
    q = q.copy()
    p = p + 0.5 * eps * grad
    for i in range(n_steps):
        q = q + eps * inv_mass * p
        lp, grad = logp_fn(q)
        if i < n_steps - 1:
            p = p + eps * grad
    p = p + 0.5 * eps * grad
    return q, p, lp, grad


def hamiltonian(logp, p, inv_mass):
    return -logp + 0.5 * float(np.sum(inv_mass * p * p))


class _DualAveraging:
    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * eps0)
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.hbar = 0.0
        self.log_eps_bar = math.log(eps0)
        self.t = 0

    def update(self, accept_prob):
        self.t += 1
        w = 1.0 / (self.t + self.t0)
        self.hbar = (1 - w) * self.hbar + w * (self.target - accept_prob)
        log_eps = self.mu - math.sqrt(self.t) / self.gamma * self.hbar
        eta = self.t ** (-self.kappa)
        self.log_eps_bar = eta * log_eps + (1 - eta) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self):
        return math.exp(self.log_eps_bar)


def _run_chain(logp_full, q0, free, cfg: HMCConfig, rng, inv_mass0):
    """One chain over the ``free`` coordinates of ``q0``."""
    full = q0.copy()

    def logp_fn(qf):
        full[free] = qf
        # aggressive early step sizes can overflow; the result is then rejected as divergent
        with np.errstate(over="ignore", invalid="ignore"):
            lp, g = logp_full(full)
        return lp, g[free]

    q = q0[free].copy()
    inv_mass = inv_mass0.copy()
    try:
        lp, grad = logp_fn(q)
    except NonFinite as exc:
        raise Diverged(f"non-finite log posterior at the initial point: {exc}") from None
    eps = cfg.step_size
    da = _DualAveraging(eps, cfg.target_accept)
    W = cfg.n_warmup
    metric_at = W // 2 if W >= 40 else None
    warm_hist = []
    draws = np.empty((cfg.n_samples, q.size))
    accepted = 0
    prob_sum = 0.0
    divergences = 0
    for it in range(W + cfg.n_samples):
        warm = it < W
        p0 = rng.standard_normal(q.size) / np.sqrt(inv_mass)
        h0 = hamiltonian(lp, p0, inv_mass)
        step = eps * rng.uniform(0.9, 1.1)
        try:
            q1, p1, lp1, g1 = leapfrog(q, p0, grad, step, cfg.leapfrog_steps, inv_mass, logp_fn)
            h1 = hamiltonian(lp1, p1, inv_mass)
            dh = h1 - h0
        except NonFinite:
            dh = math.inf
        divergent = not math.isfinite(dh) or dh > DIVERGENCE_ENERGY
        prob = 0.0 if divergent else min(1.0, math.exp(-dh))
        if not divergent and rng.uniform() < prob:
            q, lp, grad = q1, lp1, g1
            if not warm:
                accepted += 1
        if warm:
            eps = da.update(prob)
            if metric_at is not None and it >= W // 4:
                warm_hist.append(q.copy())
            if metric_at is not None and it == metric_at:
                # diagonal metric from the second quarter of warmup, shrunk like Stan's
                n = len(warm_hist)
                var = np.var(np.asarray(warm_hist), axis=0)
                inv_mass = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0)) * inv_mass0
                da = _DualAveraging(eps, cfg.target_accept)
                warm_hist = []
            if it == W - 1:
                eps = da.final
        else:
            prob_sum += prob
            divergences += int(divergent)
            draws[it - W] = q
    n = cfg.n_samples
    return draws, accepted / n, prob_sum / n, divergences, eps


def hmc_run(
    prior: PriorParams,
    data: Dataset,
    lik: LikelihoodSpec,
    cfg: HMCConfig = HMCConfig(),
    *,
    init: Optional[np.ndarray] = None,
    frozen: Optional[np.ndarray] = None,
) -> PosteriorChain:
    """Sample the weight posterior with adaptive HMC.

    Warmup adapts the step size by dual averaging toward ``target_accept`` and,
    from the middle of warmup, uses a diagonal mass matrix estimated from the
    chain. ``frozen`` is an optional boolean mask of coordinates held at their
    ``init`` values (e.g. a fixed hidden layer). Raises :class:`Diverged` when
    more than 5% of post-warmup transitions diverge.
    """
    P = prior.n_weights
    free = np.ones(P, bool) if frozen is None else ~np.asarray(frozen, bool)
    if free.size != P or not free.any():
        raise ValueError("frozen mask must match the weight vector and leave something to sample")
    if frozen is not None and init is None:
        raise ValueError("frozen coordinates need init values")
    std = prior_std(prior)
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_chains)
    results = []
    for c, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        q0 = np.array(init, float) if init is not None else 0.5 * std * rng.standard_normal(P)
        results.append(
            _run_chain(lambda w: log_posterior(w, prior, data, lik), q0, free, cfg, rng, std[free] ** 2)
        )
    draws_free = np.stack([r[0] for r in results])
    if frozen is None:
        draws = draws_free
    else:
        draws = np.broadcast_to(np.asarray(init, float), draws_free.shape[:2] + (P,)).copy()
        draws[:, :, free] = draws_free
    chain = PosteriorChain(
        draws,
        np.array([r[1] for r in results]),
        np.array([r[2] for r in results]),
        np.array([r[3] for r in results]),
        np.array([r[4] for r in results]),
        cfg,
    )
    n_div = chain.n_divergences
    if n_div > MAX_DIVERGENT_FRACTION * cfg.n_chains * cfg.n_samples:
        raise Diverged(f"{n_div} divergent transitions out of {cfg.n_chains * cfg.n_samples}", chain)
    return chain


# ---------------------------------------------------------------- predictive


@dataclass
class Predictive:
    mean: np.ndarray
    total_variance: np.ndarray
    epistemic_variance: np.ndarray
    aleatoric_variance: np.ndarray
    draws: np.ndarray  # per-draw latent outputs (D, n)
    kind: str

    @property
    def prob(self) -> np.ndarray:
        if self.kind != "bernoulli_logit":
            raise AttributeError("prob is only defined for classification")
        return self.mean


def predictive(
    chain: PosteriorChain,
    prior: PriorParams,
    lik: LikelihoodSpec,
    X_star,
    max_draws: Optional[int] = None,
) -> Predictive:
    """Monte Carlo predictive summaries over (optionally thinned) posterior draws.

    Regression: mean of per-draw outputs, epistemic = their variance,
    aleatoric = noise variance. Classification: mean probability,
    epistemic = Var[p], aleatoric = E[p(1 - p)], total = pbar(1 - pbar).
    """
    X = X_star.points if isinstance(X_star, InputSet) else np.asarray(X_star, float)
    W = chain.flat
    if W.shape[0] == 0:
        raise ValueError("chain has no draws")
    if max_draws is not None and W.shape[0] > max_draws:
        W = W[np.linspace(0, W.shape[0] - 1, max_draws).round().astype(int)]
    F = np.vstack([network(W[i : i + 256], prior, X) for i in range(0, W.shape[0], 256)])
    if lik.kind == "gaussian":
        mean = F.mean(axis=0)
        epi = F.var(axis=0)
        ale = np.full_like(mean, lik.noise_variance)
        return Predictive(mean, epi + ale, epi, ale, F, lik.kind)
    P = expit(F)
    mean = P.mean(axis=0)
    epi = P.var(axis=0)
    ale = np.mean(P * (1 - P), axis=0)
    return Predictive(mean, ale + epi, epi, ale, F, lik.kind)


def rmse(pred: Predictive, target) -> float:
    r = pred.mean - np.asarray(target, float)
    return float(np.sqrt(np.mean(r * r)))


def nll(pred: Predictive, lik: LikelihoodSpec, y) -> float:
    """Mean negative log predictive density, the mixture taken over draws."""
    y = np.asarray(y, float)
    F = pred.draws
    if lik.kind == "gaussian":
        v = lik.noise_variance
        lp = -0.5 * (y[None, :] - F) ** 2 / v - 0.5 * math.log(2 * math.pi * v)
        return float(-np.mean(logsumexp(lp, axis=0) - math.log(F.shape[0])))
    p = np.clip(pred.mean, 1e-12, 1 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
