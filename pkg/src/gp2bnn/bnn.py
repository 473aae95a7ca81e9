"""Single-hidden-layer BNN functional prior with reparameterised sampling.

A draw is

    h_j(x) = sum_i w0_ji x_i + b0_j             w0 ~ N(0, s_w0^2), b0 ~ N(0, s_b0^2)
    f(x)   = sum_j w1_j phi(h_j(x)) + b1        w1 ~ N(0, s_wl^2 / H), b1 ~ N(0, s_bl^2)

All randomness enters through standard-normal noise arrays so gradients can
flow to the scales (see :mod:`gp2bnn.grad`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from . import activations as acts
from .gp import DimMismatch, FunctionBatch, InputSet

DEFAULT_WIDTH = 128
WIDE_WIDTH = 1000

# elements of the (samples, hidden, inputs) pre-activation tensor processed at once
CHUNK_ELEMENTS = 2_000_000


@dataclass(frozen=True)
class PriorParams:
    width: int
    input_dim: int
    sigma_b0: float
    sigma_w0: float
    sigma_bl: float
    sigma_wl: float
    activation: acts.Activation

    def __post_init__(self):
        if self.width < 1 or self.input_dim < 1:
            raise ValueError("width and input_dim must be positive")
        for name in ("sigma_b0", "sigma_w0", "sigma_bl", "sigma_wl"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([self.sigma_b0, self.sigma_w0, self.sigma_bl, self.sigma_wl])

    @property
    def n_weights(self) -> int:
        return self.width * (self.input_dim + 2) + 1

    def with_width(self, width: int) -> "PriorParams":
        return replace(self, width=int(width))

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "input_dim": self.input_dim,
            "sigma_b0": self.sigma_b0,
            "sigma_w0": self.sigma_w0,
            "sigma_bl": self.sigma_bl,
            "sigma_wl": self.sigma_wl,
            "activation": self.activation.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorParams":
        return cls(
            width=int(d["width"]),
            input_dim=int(d["input_dim"]),
            sigma_b0=float(d["sigma_b0"]),
            sigma_w0=float(d["sigma_w0"]),
            sigma_bl=float(d["sigma_bl"]),
            sigma_wl=float(d["sigma_wl"]),
            activation=acts.from_dict(d["activation"]),
        )


def default_prior(activation="nn:5:silu", width=DEFAULT_WIDTH, input_dim=1, rng=None) -> PriorParams:
    """Unit variances with the given activation (a spec string or an instance)."""
    if isinstance(activation, str):
        activation = acts.make_activation(activation, rng=rng)
    return PriorParams(width, input_dim, 1.0, 1.0, 1.0, 1.0, activation)


class Noise(NamedTuple):
    w0: np.ndarray  # (S, H, I)
    b0: np.ndarray  # (S, H)
    w1: np.ndarray  # (S, H)
    b1: np.ndarray  # (S,)


def draw_noise(
    n_samples: int,
    width: int,
    input_dim: int,
    rng: np.random.Generator,
    output_rng: Optional[np.random.Generator] = None,
) -> Noise:
    """Standard-normal noise for ``n_samples`` networks; input layer first, then output layer."""
    w0 = rng.standard_normal((n_samples, width, input_dim))
    b0 = rng.standard_normal((n_samples, width))
    out = rng if output_rng is None else output_rng
    w1 = out.standard_normal((n_samples, width))
    b1 = out.standard_normal(n_samples)
    return Noise(w0, b0, w1, b1)


def chunk_slices(n_samples: int, width: int, n_inputs: int):
    step = max(1, CHUNK_ELEMENTS // max(1, width * n_inputs))
    for start in range(0, n_samples, step):
        yield slice(start, min(n_samples, start + step))


def preactivations(sigma_w0: float, sigma_b0: float, noise_w0, noise_b0, X: np.ndarray) -> np.ndarray:
    """Hidden pre-activations, shape (S, H, n)."""
    return sigma_w0 * np.einsum("shi,ni->shn", noise_w0, X) + sigma_b0 * noise_b0[:, :, None]


def functions_from_noise(p: PriorParams, X: np.ndarray, noise: Noise) -> np.ndarray:
    S, H = noise.b0.shape
    out = np.empty((S, X.shape[0]))
    scale = p.sigma_wl / math.sqrt(H)
    for sl in chunk_slices(S, H, X.shape[0]):
        h = preactivations(p.sigma_w0, p.sigma_b0, noise.w0[sl], noise.b0[sl], X)
        a = p.activation.value(h)
        out[sl] = scale * np.einsum("sh,shn->sn", noise.w1[sl], a) + p.sigma_bl * noise.b1[sl, None]
    return out


def sample_functions(
    p: PriorParams,
    X: InputSet,
    n_samples: int,
    rng: np.random.Generator,
    output_rng: Optional[np.random.Generator] = None,
) -> FunctionBatch:
    """Draw ``n_samples`` functions from the BNN prior evaluated on ``X``.

    ``output_rng``, when given, supplies the output-layer noise so input-layer
    draws can be held fixed while output weights are resampled.
    """
    if not isinstance(X, InputSet):
        X = InputSet(X)
    if X.dim != p.input_dim:
        raise DimMismatch(f"inputs have dim {X.dim}, prior expects {p.input_dim}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    noise = draw_noise(n_samples, p.width, p.input_dim, rng, output_rng)
    return FunctionBatch(X, functions_from_noise(p, X.points, noise), source="bnn")


def mc_covariance(
    p: PriorParams,
    x,
    x2,
    n: int,
    rng: np.random.Generator,
    output_rng: Optional[np.random.Generator] = None,
) -> tuple[float, float]:
    """Monte Carlo estimate of Cov(f(x), f(x2)) and its standard error.

    The estimate is the unbiased sample covariance of ``n`` prior draws; the
    standard error is that of the mean of centred products.
    """
    if n < 2:
        raise ValueError("need n >= 2 draws")
    pts = np.vstack([np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(x2, float))])
    f = sample_functions(p, InputSet(pts), n, rng, output_rng).values
    c = f - f.mean(axis=0)
    prod = c[:, 0] * c[:, 1]
    est = prod.sum() / (n - 1)
    se = prod.std(ddof=1) / math.sqrt(n)
    return float(est), float(se)
