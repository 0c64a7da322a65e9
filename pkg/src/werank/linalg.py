"""Dense matrix helpers, one-sided Jacobi SVD and spectral summaries.

Matrices are plain 2-D ``float64`` numpy arrays in row-major (C) order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12
DEFAULT_RANK_TOL = 1e-6


class SVDConvergenceError(RuntimeError):
    """Raised when Jacobi sweeps hit the iteration cap."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array (vectors become one row)."""
    m = np.array(a, dtype=np.float64, order="C", copy=True)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


@dataclass(frozen=True)
class Spectrum:
    """Singular values sorted in descending order."""

    sigmas: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64).ravel()
        if np.any(s < 0):
            raise ValueError("singular values must be non-negative")
        if np.any(np.diff(s) > 0):
            raise ValueError("singular values must be sorted descending")
        object.__setattr__(self, "sigmas", s)

    def __len__(self) -> int:
        return self.sigmas.size

    @classmethod
    def from_values(cls, values) -> "Spectrum":
        """Build a spectrum from unsorted values; tiny negatives are clipped."""
        v = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0.0, None)
        return cls(np.sort(v)[::-1].copy())


@dataclass(frozen=True)
class CovarianceSummary:
    cov: np.ndarray
    mean: np.ndarray
    sample_count: int
    eigvals: np.ndarray


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule covering every index pair once in n-1 rounds.

    Pairs within a round are disjoint so their rotations commute and can be
    applied together.
    """
    idx = list(range(n))
    if n % 2:
        idx.append(-1)
    m = len(idx)
    rounds = []
    for _ in range(m - 1):
        top = np.array(idx[: m // 2])
        bot = np.array(idx[m // 2:][::-1])
        keep = (top >= 0) & (bot >= 0)
        rounds.append((top[keep], bot[keep]))
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def _jacobi_columns(a: np.ndarray, max_sweeps: int, tol: float):
    """Orthogonalize the columns of ``a`` in place; returns (A·V, V)."""
    n = a.shape[1]
    v = np.eye(n)
    if n < 2:
        return a, v
    schedule = _round_robin(n)
    # exact or rounding-level zero columns are left alone
    tiny = (np.finfo(float).eps * np.linalg.norm(a)) ** 2
    for sweep in range(max_sweeps):
        rotated = False
        for p, q in schedule:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            scale = np.sqrt(alpha * beta)
            active = (alpha > tiny) & (beta > tiny) & (np.abs(gamma) > tol * scale)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = a[:, p], a[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            return a, v
    raise SVDConvergenceError(
        f"one-sided Jacobi did not converge in {max_sweeps} sweeps "
        f"(shape {a.shape}, column norms {np.linalg.norm(a, axis=0).min():.3e}.."
        f"{np.linalg.norm(a, axis=0).max():.3e})"
    )


def _complete_basis(u: np.ndarray, k: int) -> np.ndarray:
    """Extend the first ``k`` orthonormal columns of ``u`` to a full orthonormal set."""
    m, r = u.shape
    if k == r:
        return u
    basis = u[:, :k]
    extra = []
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        for _ in range(2):
            e -= basis @ (basis.T @ e)
            for x in extra:
                e -= x * (x @ e)
        norm = np.linalg.norm(e)
        if norm > 1e-6:
            extra.append(e / norm)
        if len(extra) == r - k:
            break
    return np.column_stack([basis] + extra)


def svd(a, max_sweeps: int = JACOBI_MAX_SWEEPS, tol: float = JACOBI_TOL):
    """Thin SVD ``a = U @ diag(sigma) @ Vt`` by one-sided (Hestenes) Jacobi.

    Returns ``(U, Spectrum, Vt)`` with ``U`` of shape (m, k), ``Vt`` of shape
    (k, n) and ``k = min(m, n)``.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m < n:
        u, spec, vt = svd(a.T, max_sweeps, tol)
        return vt.T.copy(), spec, u.T.copy()
    work, v = _jacobi_columns(a.copy(), max_sweeps, tol)
    sig = np.linalg.norm(work, axis=0)
    order = np.argsort(-sig, kind="stable")
    sig, work, v = sig[order], work[:, order], v[:, order]
    floor = sig[0] * max(m, n) * np.finfo(float).eps if sig.size and sig[0] > 0 else 0.0
    nonzero = int(np.sum(sig > floor))
    u = np.zeros((m, n))
    u[:, :nonzero] = work[:, :nonzero] / sig[:nonzero]
    u = _complete_basis(u, nonzero)
    sig[nonzero:] = np.where(sig[nonzero:] > 0, sig[nonzero:], 0.0)
    return u, Spectrum(sig), v.T.copy()


def singular_values(a) -> Spectrum:
    return svd(a)[1]


def covariance(z) -> CovarianceSummary:
    """Population covariance (divides by N) of the rows of ``z``."""
    z = as_matrix(z, "z")
    n = z.shape[0]
    mean = z.mean(axis=0)
    centered = z - mean
    cov = centered.T @ centered / n
    cov = 0.5 * (cov + cov.T)
    eig = np.linalg.eigvalsh(cov)[::-1].copy()
    return CovarianceSummary(cov=cov, mean=mean, sample_count=n, eigvals=eig)


def frob_dist_to_identity(c) -> float:
    c = as_matrix(c, "c")
    if c.shape[0] != c.shape[1]:
        raise ValueError(f"expected a square matrix, got {c.shape}")
    return float(np.sqrt(np.sum((c - np.eye(c.shape[0])) ** 2)))


def numerical_rank(s: Spectrum, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above ``rel_tol * sigma_max``."""
    if not 0 < rel_tol < 1:
        raise ValueError("rel_tol must lie in (0, 1)")
    sig = s.sigmas
    if sig.size == 0 or sig[0] <= 0:
        return 0
    return int(np.sum(sig > rel_tol * sig[0]))


def effective_rank(s: Spectrum) -> float:
    """Exponential of the Shannon entropy of the normalized spectrum."""
    sig = s.sigmas
    total = sig.sum()
    if total <= 0:
        raise ValueError("effective rank undefined for an all-zero spectrum")
    p = sig / total
    p = p[p > 0]  # tiny sigmas can underflow to zero after division
    return float(np.exp(-np.sum(p * np.log(p))))
