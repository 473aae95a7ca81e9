"""MLP hypernetwork mapping a GP lengthscale to prior scales and activation parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .activations import Activation, PeriodicFourier

HIDDEN_WIDTHS = (128, 32, 8)


def _rbf(u):
    return np.exp(-u * u)


def _rbf_d(u):
    return -2.0 * u * np.exp(-u * u)


@dataclass
class Hypernetwork:
    """``[log sigma, eta] = hnet(log gamma | theta)``.

    Hidden layers use ``exp(-u^2)``. Heads are separate linear maps from the
    last hidden layer: a 4-wide head for the log prior scales and, for periodic
    activations, one head for all frequencies and one for all amplitudes; other
    activation families get a single head sized to ``eta``. Scales leave the
    network in log space, so exponentiating keeps them positive.
    """

    activation: Activation
    hidden: tuple = HIDDEN_WIDTHS
    heads: tuple = field(init=False)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        n_eta = self.activation.n_params
        if isinstance(self.activation, PeriodicFourier):
            half = n_eta // 2
            self.heads = (("log_sigma", 4), ("freqs", half), ("amps", half))
        elif n_eta:
            self.heads = (("log_sigma", 4), ("eta", n_eta))
        else:
            self.heads = (("log_sigma", 4),)
        dims = (1,) + self.hidden
        self._layer_shapes = list(zip(dims[:-1], dims[1:]))
        self._head_shapes = [(self.hidden[-1], size) for _, size in self.heads]

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self._layer_shapes + self._head_shapes)

    def init_theta(self, rng: np.random.Generator, log_sigma0=None, head_scale: float = 0.01) -> np.ndarray:
        """Fan-in Gaussian hidden weights; heads start near the unconditional initial prior."""
        log_sigma0 = np.zeros(4) if log_sigma0 is None else np.asarray(log_sigma0, float)
        chunks = []
        for fan_in, fan_out in self._layer_shapes:
            chunks.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), fan_in * fan_out))
            chunks.append(rng.normal(0.0, 0.1, fan_out))
        bias_init = np.concatenate([log_sigma0, self.activation.params])
        k = 0
        for fan_in, fan_out in self._head_shapes:
            chunks.append(rng.normal(0.0, head_scale / math.sqrt(fan_in), fan_in * fan_out))
            chunks.append(bias_init[k : k + fan_out].copy())
            k += fan_out
        return np.concatenate(chunks)

    def _unpack(self, theta):
        theta = np.asarray(theta, float)
        if theta.size != self.n_params:
            raise ValueError(f"hypernetwork expects {self.n_params} parameters, got {theta.size}")
        mats, k = [], 0
        for fan_in, fan_out in self._layer_shapes + self._head_shapes:
            W = theta[k : k + fan_in * fan_out].reshape(fan_in, fan_out)
            k += fan_in * fan_out
            b = theta[k : k + fan_out]
            k += fan_out
            mats.append((W, b))
        n = len(self._layer_shapes)
        return mats[:n], mats[n:]

    def forward(self, theta, gamma: float):
        """Returns ``(log_sigmas (4,), eta, cache)`` for lengthscale ``gamma``."""
        layers, heads = self._unpack(theta)
        a = np.array([[math.log(gamma)]])
        zs, acts = [], [a]
        for W, b in layers:
            z = a @ W + b
            a = _rbf(z)
            zs.append(z)
            acts.append(a)
        out = np.concatenate([(a @ W + b).ravel() for W, b in heads])
        return out[:4], out[4:], (zs, acts)

    def backward(self, theta, cache, g_log_sigmas, g_eta) -> np.ndarray:
        layers, heads = self._unpack(theta)
        zs, acts = cache
        g_out = np.concatenate([np.asarray(g_log_sigmas, float), np.asarray(g_eta, float)])
        a = acts[-1]
        head_grads = []
        delta = np.zeros_like(a)
        k = 0
        for W, _ in heads:
            g = g_out[k : k + W.shape[1]][None, :]
            k += W.shape[1]
            head_grads.append((a.T @ g).ravel())
            head_grads.append(g.ravel())
            delta = delta + g @ W.T
        layer_grads = [None] * len(layers)
        for li in range(len(layers) - 1, -1, -1):
            delta = delta * _rbf_d(zs[li])
            layer_grads[li] = np.concatenate([(acts[li].T @ delta).ravel(), delta.ravel()])
            delta = delta @ layers[li][0].T
        return np.concatenate(layer_grads + head_grads)

    def to_dict(self) -> dict:
        return {"hidden": list(self.hidden), "activation": self.activation.to_dict()}
