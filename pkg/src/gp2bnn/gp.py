"""GP kernels, Gram matrices and zero-mean GP function sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linalg import JitterPolicy, cholesky

FAMILIES = ("rbf", "matern12", "matern32", "matern52", "periodic", "rbf_ard")


class DimMismatch(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    family: str
    lengthscale: float | tuple = 1.0
    amplitude: float = 1.0
    period: Optional[float] = None
    input_dim: int = 1

    def __post_init__(self):
        fam = self.family.lower()
        if fam not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "family", fam)
        ls = np.atleast_1d(np.asarray(self.lengthscale, dtype=float))
        if np.any(~np.isfinite(ls)) or np.any(ls <= 0):
            raise ValueError("lengthscale must be positive")
        if fam == "rbf_ard":
            if ls.size == 1 and self.input_dim > 1:
                ls = np.full(self.input_dim, ls[0])
            if ls.size != self.input_dim:
                raise DimMismatch(
                    f"ARD lengthscale has {ls.size} entries for input_dim {self.input_dim}"
                )
            object.__setattr__(self, "lengthscale", tuple(float(v) for v in ls))
        else:
            if ls.size != 1:
                raise ValueError(f"{fam} takes a scalar lengthscale")
            object.__setattr__(self, "lengthscale", float(ls[0]))
        if not self.amplitude > 0:
            raise ValueError("amplitude must be positive")
        if fam == "periodic":
            if self.period is None or not self.period > 0:
                raise ValueError("periodic kernel needs a positive period")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")

    def with_lengthscale(self, lengthscale) -> "KernelSpec":
        return KernelSpec(self.family, lengthscale, self.amplitude, self.period, self.input_dim)

    def to_dict(self) -> dict:
        d = {
            "family": self.family,
            "lengthscale": list(self.lengthscale) if isinstance(self.lengthscale, tuple) else self.lengthscale,
            "amplitude": self.amplitude,
            "input_dim": self.input_dim,
        }
        if self.period is not None:
            d["period"] = self.period
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        ls = d.get("lengthscale", 1.0)
        if isinstance(ls, list):
            ls = tuple(ls)
        return cls(d["family"], ls, d.get("amplitude", 1.0), d.get("period"), d.get("input_dim", 1))


@dataclass
class InputSet:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError(f"input set must be n x d with n >= 1, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("input coordinates must be finite")
        self.points = pts

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def shifted(self, c: float) -> "InputSet":
        return InputSet(self.points + c)

    @classmethod
    def grid(cls, lo: float, hi: float, n: int) -> "InputSet":
        return cls(np.linspace(lo, hi, n)[:, None])


@dataclass
class FunctionBatch:
    inputs: InputSet
    values: np.ndarray
    source: str = "gp"

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[1] != self.inputs.n:
            raise DimMismatch(f"{self.values.shape[1]} columns for {self.inputs.n} inputs")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("function values must be finite")
        if self.source not in ("gp", "bnn"):
            raise ValueError(f"source must be 'gp' or 'bnn', got {self.source!r}")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    return x


def _kernel_matrix(k: KernelSpec, X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
    if X1.shape[1] != k.input_dim or X2.shape[1] != k.input_dim:
        raise DimMismatch(f"kernel expects dim {k.input_dim}, got {X1.shape[1]} and {X2.shape[1]}")
    amp2 = k.amplitude**2
    diff = X1[:, None, :] - X2[None, :, :]
    if k.family == "rbf_ard":
        ls = np.asarray(k.lengthscale)
        return amp2 * np.exp(-0.5 * np.sum((diff / ls) ** 2, axis=-1))
    if k.family == "periodic":
        # product over dimensions of the standard exp-sine-squared form
        s = np.sin(np.pi * np.abs(diff) / k.period)
        return amp2 * np.exp(-2.0 * np.sum(s**2, axis=-1) / k.lengthscale**2)
    r = np.sqrt(np.sum(diff**2, axis=-1)) / k.lengthscale
    if k.family == "rbf":
        return amp2 * np.exp(-0.5 * r**2)
    if k.family == "matern12":
        return amp2 * np.exp(-r)
    if k.family == "matern32":
        a = np.sqrt(3.0) * r
        return amp2 * (1.0 + a) * np.exp(-a)
    a = np.sqrt(5.0) * r
    return amp2 * (1.0 + a + a**2 / 3.0) * np.exp(-a)


def kernel_eval(k: KernelSpec, x, x2) -> float:
    x, x2 = _as_points(x), _as_points(x2)
    return float(_kernel_matrix(k, x[None, :], x2[None, :])[0, 0])


def gram(k: KernelSpec, X: InputSet | np.ndarray, X2: InputSet | np.ndarray | None = None) -> np.ndarray:
    P = X.points if isinstance(X, InputSet) else InputSet(X).points
    if X2 is None:
        K = _kernel_matrix(k, P, P)
        return 0.5 * (K + K.T)
    P2 = X2.points if isinstance(X2, InputSet) else InputSet(X2).points
    return _kernel_matrix(k, P, P2)


def sample_gp(
    k: KernelSpec,
    X: InputSet,
    n_samples: int,
    rng: np.random.Generator,
    jitter: JitterPolicy = JitterPolicy(),
) -> FunctionBatch:
    """Draw ``n_samples`` i.i.d. zero-mean GP functions evaluated on ``X``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    L, _ = cholesky(gram(k, X), jitter)
    z = rng.standard_normal((n_samples, X.n))
    return FunctionBatch(X, z @ L.T, source="gp")
