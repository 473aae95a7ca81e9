"""Reverse-mode gradients of the prior-matching loss.

The differentiated pipeline is fixed:

    noise -> pre-activations -> phi(.|eta) -> output layer -> (mean, cov) -> W2 (+ regulariser)

Each stage's adjoint is written out by hand below. Noise is drawn once per call
from the supplied generator, so a given ``(params, seed)`` pair always yields
the same loss and gradient (common random numbers for finite differences).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .activations import Activation
from .bnn import PriorParams, chunk_slices, draw_noise
from .hypernet import Hypernetwork
from .metrics import moment_regularizer_and_grad, w2_gaussian_and_grad

SIGMA_NAMES = ("log_sigma_b0", "log_sigma_w0", "log_sigma_bl", "log_sigma_wl")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class ParamVector:
    """Flat trainable vector with a stable, named segment layout."""

    values: np.ndarray
    layout: tuple  # ((name, size), ...)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.size != sum(size for _, size in self.layout):
            raise ValueError("values do not match the segment layout")

    def _slices(self):
        out, k = {}, 0
        for name, size in self.layout:
            out[name] = slice(k, k + size)
            k += size
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self._slices()[name]]

    def __contains__(self, name: str) -> bool:
        return any(n == name for n, _ in self.layout)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.array(values, dtype=float), self.layout)

    @property
    def log_sigmas(self) -> np.ndarray:
        return np.array([self[n][0] for n in SIGMA_NAMES])

    @classmethod
    def from_prior(cls, prior: PriorParams) -> "ParamVector":
        layout = tuple((n, 1) for n in SIGMA_NAMES) + (("eta", prior.activation.n_params),)
        values = np.concatenate([np.log(prior.sigmas), prior.activation.params])
        return cls(values, layout)

    @classmethod
    def for_hypernet(cls, theta) -> "ParamVector":
        theta = np.asarray(theta, float)
        return cls(theta, (("hnet_theta", theta.size),))

    def to_prior(self, template: PriorParams) -> PriorParams:
        s = np.exp(self.log_sigmas)
        return PriorParams(
            template.width,
            template.input_dim,
            float(s[0]),
            float(s[1]),
            float(s[2]),
            float(s[3]),
            template.activation.with_params(self["eta"]),
        )


@dataclass
class TargetSet:
    """One input set with the target moments (and optionally target samples) on it."""

    X: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    samples: Optional[np.ndarray] = None

    @classmethod
    def from_samples(cls, X, samples) -> "TargetSet":
        samples = np.asarray(samples, float)
        mu = samples.mean(axis=0)
        c = samples - mu
        cov = c.T @ c / (samples.shape[0] - 1)
        return cls(np.asarray(X, float), mu, 0.5 * (cov + cov.T), samples)


@dataclass
class TrainingBatchSpec:
    sets: Sequence[TargetSet]
    mc_samples: int
    width: int
    activation: Activation
    regularizer_weight: float = 0.0
    gamma: Optional[float] = None
    hypernet: Optional[Hypernetwork] = None
    normalize: bool = True
    extra: dict = field(default_factory=dict)


def prior_loss_and_grad(
    log_sigmas,
    activation: Activation,
    target: TargetSet,
    mc_samples: int,
    width: int,
    rng: np.random.Generator,
    regularizer_weight: float = 0.0,
    normalize: bool = True,
):
    """Loss on one input set and its gradient w.r.t. ``log_sigmas`` (4,) and ``eta``."""
    X = np.asarray(target.X, float)
    if X.ndim == 1:
        X = X[:, None]
    n, dim = X.shape
    S, H = int(mc_samples), int(width)
    if S < 2:
        raise ValueError("need at least two Monte Carlo samples")
    sb0, sw0, sbl, swl = np.exp(np.asarray(log_sigmas, float))
    noise = draw_noise(S, H, dim, rng)
    inv_sqrt_h = 1.0 / math.sqrt(H)

    # forward: U[s, x] = sum_j w1_sj phi(h_sjx) / sqrt(H)
    U = np.empty((S, n))
    for sl in chunk_slices(S, H, n):
        z = np.einsum("shi,ni->shn", noise.w0[sl], X)
        h = sw0 * z + sb0 * noise.b0[sl, :, None]
        U[sl] = inv_sqrt_h * np.einsum("sh,shn->sn", noise.w1[sl], activation.value(h))
    F = swl * U + sbl * noise.b1[:, None]

    with np.errstate(over="ignore", invalid="ignore"):
        mu = F.mean(axis=0)
        D = F - mu
        C = D.T @ D / (S - 1)
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(C))):
        raise NonFiniteLoss("prior samples or their covariance are not finite")
    loss, g_mu, g_C = w2_gaussian_and_grad(mu, C, target.mean, target.cov, normalize=normalize)
    gF = g_mu[None, :] / S + (2.0 / (S - 1)) * D @ g_C
    if regularizer_weight > 0:
        if target.samples is None:
            raise ValueError("moment regulariser needs target samples")
        reg, g_reg = moment_regularizer_and_grad(F, target.samples)
        loss += regularizer_weight * reg
        gF = gF + regularizer_weight * g_reg
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")

    g_sbl = float(np.sum(gF * noise.b1[:, None]))
    g_swl = float(np.sum(gF * U))

    # backward through the hidden layer, chunk by chunk
    g_sw0 = 0.0
    g_sb0 = 0.0
    g_eta = np.zeros(activation.n_params)
    scale = swl * inv_sqrt_h
    for sl in chunk_slices(S, H, n):
        z = np.einsum("shi,ni->shn", noise.w0[sl], X)
        h = sw0 * z + sb0 * noise.b0[sl, :, None]
        g_a = scale * noise.w1[sl, :, None] * gF[sl, None, :]
        g_h, ge = activation.vjp(h, g_a)
        if ge.size:
            g_eta += ge
        g_sw0 += float(np.sum(g_h * z))
        g_sb0 += float(np.einsum("shn,sh->", g_h, noise.b0[sl]))

    g_log = np.array([g_sb0 * sb0, g_sw0 * sw0, g_sbl * sbl, g_swl * swl])
    if not (np.all(np.isfinite(g_log)) and np.all(np.isfinite(g_eta))):
        raise NonFiniteLoss("gradient is not finite")
    return float(loss), g_log, g_eta


def loss_and_grad(params: ParamVector, batch: TrainingBatchSpec, rng: np.random.Generator):
    """Mean loss over the batch's input sets and its gradient as a :class:`ParamVector`.

    ``params`` is either the direct layout (log scales + ``eta``) or a single
    ``hnet_theta`` segment, in which case ``batch.hypernet`` and ``batch.gamma``
    produce the prior scales and activation parameters.
    """
    conditional = "hnet_theta" in params
    if conditional:
        if batch.hypernet is None or batch.gamma is None:
            raise ValueError("hypernetwork parameters need batch.hypernet and batch.gamma")
        theta = params["hnet_theta"]
        log_sigmas, eta, cache = batch.hypernet.forward(theta, batch.gamma)
    else:
        log_sigmas, eta = params.log_sigmas, params["eta"]
    act = batch.activation.with_params(eta)

    total = 0.0
    g_log = np.zeros(4)
    g_eta = np.zeros(act.n_params)
    for target in batch.sets:
        l, gl, ge = prior_loss_and_grad(
            log_sigmas,
            act,
            target,
            batch.mc_samples,
            batch.width,
            rng,
            batch.regularizer_weight,
            batch.normalize,
        )
        total += l
        g_log += gl
        g_eta += ge
    k = len(batch.sets)
    total, g_log, g_eta = total / k, g_log / k, g_eta / k

    if conditional:
        g_theta = batch.hypernet.backward(theta, cache, g_log, g_eta)
        return total, params.with_values(g_theta)
    return total, params.with_values(np.concatenate([g_log, g_eta]))
