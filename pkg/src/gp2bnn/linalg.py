"""Dense symmetric linear algebra used by GP sampling and the Gaussian W2 loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LinAlgError(ValueError):
    pass


class NotPositiveDefinite(LinAlgError):
    pass


class NotPSD(LinAlgError):
    pass


class NoConvergence(LinAlgError):
    pass


@dataclass(frozen=True)
class JitterPolicy:
    """Diagonal jitter schedule for Cholesky: first try without jitter, then
    ``initial * mean(diag(A))`` grown by ``growth`` for ``attempts`` tries."""

    initial: float = 1e-6
    growth: float = 10.0
    attempts: int = 4


def symmetrize(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise LinAlgError(f"expected a non-empty square matrix, got shape {A.shape}")
    return 0.5 * (A + A.T)


def cholesky(A, jitter_policy: JitterPolicy = JitterPolicy()) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A + eps*I`` for the smallest accepted ``eps``.

    Returns ``(L, eps)``.
    """
    A = symmetrize(A)
    scale = float(np.mean(np.diag(A)))
    if not np.isfinite(scale):
        raise NotPositiveDefinite("matrix has non-finite diagonal")
    base = jitter_policy.initial * (scale if scale > 0 else 1.0)
    schedule = [0.0] + [base * jitter_policy.growth**k for k in range(jitter_policy.attempts)]
    eye = np.eye(A.shape[0])
    for eps in schedule:
        try:
            return np.linalg.cholesky(A + eps * eye), eps
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefinite(f"Cholesky failed with jitter up to {schedule[-1]:.3g}")


def _jacobi_eig(A: np.ndarray, max_sweeps: int) -> tuple[np.ndarray, np.ndarray]:
    # cyclic-by-row Jacobi with the Rutishauser threshold strategy
    n = A.shape[0]
    A = A.copy()
    V = np.eye(n)
    if n == 1:
        return A.diagonal().copy(), V
    frob = np.linalg.norm(A)
    if frob == 0.0:
        return np.zeros(n), V
    tiny = np.finfo(float).eps
    # entries below this are roundoff relative to the whole matrix and are zeroed
    negligible = 1e-2 * tiny * frob
    for sweep in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(A, 1) ** 2))
        if off <= tiny * frob:
            return A.diagonal().copy(), V
        thresh = 0.2 * off / n**2 if sweep < 3 else 0.0
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= thresh or apq == 0.0:
                    continue
                if abs(apq) <= negligible:
                    A[p, q] = A[q, p] = 0.0
                    continue
                rotated = True
                app, aqq = A[p, p], A[q, q]
                theta = (aqq - app) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) Givens rotation
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
        if not rotated and thresh == 0.0:
            return A.diagonal().copy(), V
    raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")


def sym_eig(A, method: str = "jacobi") -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix.

    Eigenvalues are returned in descending order with orthonormal eigenvectors
    as columns. ``method="jacobi"`` runs the cyclic Jacobi solver in this module;
    ``method="lapack"`` defers to ``numpy.linalg.eigh`` for large, hot-loop use.
    """
    A = symmetrize(A)
    if method == "jacobi":
        w, V = _jacobi_eig(A, max_sweeps=100 * A.shape[0])
    elif method == "lapack":
        w, V = np.linalg.eigh(A)
    else:
        raise ValueError(f"unknown eigen method {method!r}")
    order = np.argsort(w)[::-1]
    return w[order], V[:, order]


def _clamp_spectrum(w: np.ndarray, A: np.ndarray) -> np.ndarray:
    floor = -1e-8 * np.linalg.norm(A)
    if w.size and w.min() < floor:
        raise NotPSD(f"eigenvalue {w.min():.3g} below PSD threshold {floor:.3g}")
    return np.clip(w, 0.0, None)


def sqrtm_psd(A, method: str = "jacobi") -> np.ndarray:
    """Symmetric PSD square root; eigenvalues down to ``-1e-8*||A||_F`` are clamped to zero."""
    A = symmetrize(A)
    w, V = sym_eig(A, method=method)
    w = _clamp_spectrum(w, A)
    S = (V * np.sqrt(w)) @ V.T
    return 0.5 * (S + S.T)


def trace_sqrt_product(S1, S2) -> float:
    """``Tr(sqrt(sqrt(S1) S2 sqrt(S1)))`` as the sum of square roots of eig(S1 @ S2)."""
    S1 = symmetrize(S1)
    S2 = symmetrize(S2)
    if S1.shape != S2.shape:
        raise LinAlgError(f"shape mismatch {S1.shape} vs {S2.shape}")
    for S in (S1, S2):
        _clamp_spectrum(np.linalg.eigvalsh(S), S)
    # eig(S1 S2) equals eig of the PSD product sqrt(S1) S2 sqrt(S1); imaginary parts are roundoff
    w = np.linalg.eigvals(S1 @ S2).real
    return float(np.sum(np.sqrt(np.clip(w, 0.0, None))))


def trace_sqrt_product_direct(S1, S2, method: str = "jacobi") -> float:
    """Same quantity through explicit square roots; the slow reference route."""
    R = sqrtm_psd(S1, method=method)
    return float(np.trace(sqrtm_psd(R @ symmetrize(S2) @ R, method=method)))
