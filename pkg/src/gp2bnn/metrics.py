"""Training loss (closed-form Gaussian W2, moment regulariser) and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .gp import FunctionBatch
from .linalg import NotPSD, symmetrize


class TooFewSamples(ValueError):
    pass


class DegenerateBatch(ValueError):
    pass


class InputSetMismatch(ValueError):
    pass


# relative floor for eigenvalues of sqrt(Sb) Sa sqrt(Sb) in the W2 backward pass
EIG_FLOOR = 1e-14

# eigenvalues below this many ulps of the largest one are roundoff and count as zero
ROUNDOFF_ULPS = 16


def _sum_sqrt_eigs(lam: np.ndarray) -> float:
    """sum(sqrt(lam)) with roundoff-level eigenvalues dropped.

    A rank-deficient product carries eigenvalues of size ~eps * max(lam) that the
    square root would inflate to ~sqrt(eps); dropping them keeps the trace smooth.
    """
    top = float(lam.max(initial=0.0))
    cut = ROUNDOFF_ULPS * lam.size * np.finfo(float).eps * top
    return float(np.sum(np.sqrt(lam[lam > cut])))


@dataclass
class MomentSummary:
    mean: np.ndarray
    covariance: np.ndarray
    n_samples: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def moments(batch: FunctionBatch | np.ndarray) -> MomentSummary:
    F = batch.values if isinstance(batch, FunctionBatch) else np.atleast_2d(np.asarray(batch, float))
    n = F.shape[0]
    if n < 2:
        raise TooFewSamples("moments need at least two samples")
    mu = F.mean(axis=0)
    C = F - mu
    return MomentSummary(mu, symmetrize(C.T @ C / (n - 1)), n)


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(S)
    if w.size and w.min() < -1e-8 * np.linalg.norm(S):
        raise NotPSD(f"covariance has eigenvalue {w.min():.3g}")
    R = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    return 0.5 * (R + R.T)


def w2_gaussian(a: MomentSummary, b: MomentSummary, normalize: bool = True) -> float:
    """Squared 2-Wasserstein distance between N(a.mean, a.cov) and N(b.mean, b.cov).

    Divided by the dimension when ``normalize`` is set.
    """
    if a.dim != b.dim:
        raise InputSetMismatch(f"dimension mismatch {a.dim} vs {b.dim}")
    d = float(np.sum((a.mean - b.mean) ** 2))
    if a.dim == 1:
        sa = math.sqrt(max(float(a.covariance[0, 0]), 0.0))
        sb = math.sqrt(max(float(b.covariance[0, 0]), 0.0))
        d += (sa - sb) ** 2
    else:
        Sa, Sb = symmetrize(a.covariance), symmetrize(b.covariance)
        if np.count_nonzero(Sa - np.diag(np.diag(Sa))) == 0 and np.count_nonzero(Sb - np.diag(np.diag(Sb))) == 0:
            da, db = np.diag(Sa), np.diag(Sb)
            if min(da.min(), db.min()) < -1e-8 * max(np.abs(da).max(), np.abs(db).max(), 1e-300):
                raise NotPSD("negative variance on the diagonal")
            d += float(np.sum((np.sqrt(np.clip(da, 0, None)) - np.sqrt(np.clip(db, 0, None))) ** 2))
        else:
            _psd_sqrt(Sa)
            R = _psd_sqrt(Sb)
            lam = np.linalg.eigvalsh(R @ Sa @ R)
            d += float(np.trace(Sa) + np.trace(Sb)) - 2.0 * _sum_sqrt_eigs(lam)
    if normalize:
        d /= a.dim
    return max(d, 0.0)


def w2_gaussian_and_grad(
    mean_a: np.ndarray, cov_a: np.ndarray, mean_b: np.ndarray, cov_b: np.ndarray, normalize: bool = True
) -> tuple[float, np.ndarray, np.ndarray]:
    """W2 loss with gradients w.r.t. ``mean_a`` and ``cov_a``; ``b`` is held constant.

    With ``M = sqrt(Sb) Sa sqrt(Sb) = V diag(lam) V^T`` the trace term is
    ``sum sqrt(lam)`` and its derivative is ``sqrt(Sb) V diag(lam^-1/2) V^T sqrt(Sb) / 2``
    (the trace of a spectral function has no eigenvector-gap terms). Eigenvalues
    are floored at ``EIG_FLOOR * max(lam)`` so rank-deficient estimates stay finite.
    """
    n = mean_a.shape[0]
    diff = mean_a - mean_b
    Sa, Sb = symmetrize(cov_a), symmetrize(cov_b)
    R = _psd_sqrt(Sb)
    lam, V = np.linalg.eigh(R @ Sa @ R)
    lam_pos = np.clip(lam, 0.0, None)
    tr_sqrt = _sum_sqrt_eigs(lam_pos)
    loss = float(diff @ diff + np.trace(Sa) + np.trace(Sb) - 2.0 * tr_sqrt)
    floor = EIG_FLOOR * max(float(lam_pos.max(initial=0.0)), 1e-300)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(lam_pos, floor))
    RV = R @ V
    T = (RV * inv_sqrt) @ RV.T
    g_cov = np.eye(n) - 0.5 * (T + T.T)
    g_mean = 2.0 * diff
    if normalize:
        loss /= n
        g_cov /= n
        g_mean /= n
    return loss, g_mean, g_cov


def _pooled(values: np.ndarray):
    x = np.asarray(values, float).ravel()
    c = x - x.mean()
    var = float(np.mean(c * c))
    if not var > 0:
        raise DegenerateBatch("pooled variance is zero")
    m3 = float(np.mean(c**3))
    m4 = float(np.mean(c**4))
    return c, var, m3, m4


def _pooled_stats(values):
    _, var, m3, m4 = _pooled(values)
    return var, m3 / var**1.5, m4 / var**2


def moment_regularizer(a: FunctionBatch | np.ndarray, b: FunctionBatch | np.ndarray) -> float:
    """Squared gaps of pooled variance, skewness and kurtosis between two batches."""
    va = a.values if isinstance(a, FunctionBatch) else a
    vb = b.values if isinstance(b, FunctionBatch) else b
    sa, sb = _pooled_stats(va), _pooled_stats(vb)
    return float(sum((x - y) ** 2 for x, y in zip(sa, sb)))


def moment_regularizer_and_grad(fa: np.ndarray, fb: np.ndarray) -> tuple[float, np.ndarray]:
    """Regulariser value and its gradient w.r.t. every entry of ``fa``."""
    c, var, m3, m4 = _pooled(fa)
    N = c.size
    skew, kurt = m3 / var**1.5, m4 / var**2
    vb, sb, kb = _pooled_stats(fb)
    dv, ds, dk = var - vb, skew - sb, kurt - kb
    value = dv**2 + ds**2 + dk**2
    g_var = 2.0 * c / N
    g_m3 = 3.0 * (c * c - var) / N
    g_m4 = 4.0 * (c**3 - m3) / N
    g_skew = g_m3 / var**1.5 - 1.5 * m3 / var**2.5 * g_var
    g_kurt = g_m4 / var**2 - 2.0 * m4 / var**3 * g_var
    grad = 2.0 * (dv * g_var + ds * g_skew + dk * g_kurt)
    return float(value), grad.reshape(np.shape(fa))


def _paired(a: FunctionBatch, b: FunctionBatch):
    if a.inputs.points.shape != b.inputs.points.shape or not np.allclose(a.inputs.points, b.inputs.points):
        raise InputSetMismatch("batches are evaluated on different input sets")
    m = min(a.n_samples, b.n_samples)
    return a.values[:m], b.values[:m]


def empirical_w1(a: FunctionBatch, b: FunctionBatch) -> float:
    """Average over inputs of the sorted-sample 1-Wasserstein distance between marginals."""
    A, B = _paired(a, b)
    return float(np.mean(np.abs(np.sort(A, axis=0) - np.sort(B, axis=0))))


def _mmd_gram(kernel: str, X: np.ndarray, Y: np.ndarray, bandwidth: float) -> np.ndarray:
    if kernel == "linear":
        return X @ Y.T
    if kernel == "poly":
        return (X @ Y.T / X.shape[1] + 1.0) ** 3
    if kernel == "rbf":
        sq = np.sum(X * X, 1)[:, None] + np.sum(Y * Y, 1)[None, :] - 2.0 * X @ Y.T
        return np.exp(-np.clip(sq, 0.0, None) / (2.0 * bandwidth**2))
    raise ValueError(f"unknown MMD kernel {kernel!r}")


def median_bandwidth(X: np.ndarray, Y: np.ndarray) -> float:
    Z = np.vstack([X, Y])
    sq = np.sum(Z * Z, 1)
    D = np.sqrt(np.clip(sq[:, None] + sq[None, :] - 2.0 * Z @ Z.T, 0.0, None))
    iu = np.triu_indices(Z.shape[0], k=1)
    med = float(np.median(D[iu])) if iu[0].size else 1.0
    return med if med > 0 else 1.0


def mmd_with_se(a: FunctionBatch, b: FunctionBatch, kernel: str = "rbf", bandwidth: float | None = None):
    """Unbiased MMD^2 U-statistic with a first-order standard error.

    Returns ``(value, se, bandwidth)``; ``bandwidth`` is only meaningful for ``rbf``
    and defaults to the median pairwise distance of the pooled sample.
    """
    X, Y = _paired(a, b)
    m = X.shape[0]
    if m < 2:
        raise TooFewSamples("MMD needs at least two samples per batch")
    if kernel == "rbf" and bandwidth is None:
        bandwidth = median_bandwidth(X, Y)
    H = (
        _mmd_gram(kernel, X, X, bandwidth)
        + _mmd_gram(kernel, Y, Y, bandwidth)
        - _mmd_gram(kernel, X, Y, bandwidth)
        - _mmd_gram(kernel, Y, X, bandwidth)
    )
    np.fill_diagonal(H, 0.0)
    value = float(H.sum() / (m * (m - 1)))
    row = H.sum(axis=1) / (m - 1)
    se = float(math.sqrt(4.0 * row.var(ddof=1) / m))
    return value, se, bandwidth


def mmd(a: FunctionBatch, b: FunctionBatch, kernel: str = "rbf") -> float:
    return mmd_with_se(a, b, kernel)[0]


def pointwise_discrepancies(a: FunctionBatch, b: FunctionBatch) -> dict:
    """MSE / L2 (root mean square) / L1 (mean absolute) gaps of per-input means and medians."""
    A, B = _paired(a, b)
    out = {}
    for name, stat in (("mean", np.mean), ("median", np.median)):
        gap = stat(A, axis=0) - stat(B, axis=0)
        mse = float(np.mean(gap**2))
        out[f"{name}_mse"] = mse
        out[f"{name}_l2"] = math.sqrt(mse)
        out[f"{name}_l1"] = float(np.mean(np.abs(gap)))
    return out


METRIC_FIELDS = (
    "w1",
    "w2",
    "mmd_linear",
    "mmd_poly",
    "mmd_rbf",
    "mean_mse",
    "mean_l2",
    "mean_l1",
    "median_mse",
    "median_l2",
    "median_l1",
)


@dataclass
class MetricReport:
    w1: float
    w2: float
    mmd_linear: float
    mmd_poly: float
    mmd_rbf: float
    mean_mse: float
    mean_l2: float
    mean_l1: float
    median_mse: float
    median_l2: float
    median_l1: float
    meta: dict = field(default_factory=dict)

    def values(self) -> dict:
        d = asdict(self)
        d.pop("meta")
        return d

    def to_dict(self) -> dict:
        return asdict(self)


def compare(a: FunctionBatch, b: FunctionBatch) -> MetricReport:
    """Full metric suite between two function batches (``a`` model, ``b`` reference)."""
    A, B = _paired(a, b)
    rbf_val, rbf_se, bw = mmd_with_se(a, b, "rbf")
    lin_val, lin_se, _ = mmd_with_se(a, b, "linear")
    poly_val, poly_se, _ = mmd_with_se(a, b, "poly")
    return MetricReport(
        w1=empirical_w1(a, b),
        w2=w2_gaussian(moments(A), moments(B), normalize=True),
        mmd_linear=lin_val,
        mmd_poly=poly_val,
        mmd_rbf=rbf_val,
        **pointwise_discrepancies(a, b),
        meta={
            "n_samples": int(A.shape[0]),
            "n_inputs": int(A.shape[1]),
            "rbf_bandwidth": bw,
            "poly_kernel": "(x.y/d + 1)^3",
            "mmd_se": {"linear": lin_se, "poly": poly_se, "rbf": rbf_se},
        },
    )

