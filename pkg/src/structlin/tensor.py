"""Small dense numerics substrate.

Dense tensors are plain ``numpy.ndarray`` objects in float64, row-major. The
helpers here add the pieces the rest of the package relies on: shape-checked
(batched) matrix products that can report multiply-accumulate counts, a
one-sided Jacobi SVD, a seeded Gaussian sampler and an RMS reduction.

Random numbers come from numpy's counter-based Philox generator, so a given
seed produces the same stream on every platform.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError, NumericalError

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12


@dataclass
class MacCounter:
    """Accumulates multiply-accumulate operations performed by products."""

    count: int = 0

    def add(self, n: int) -> None:
        self.count += int(n)


def as_tensor(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def matmul(a, b, counter: MacCounter | None = None) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    if counter is not None:
        counter.add(a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def bmm(a: np.ndarray, b: np.ndarray, counter: MacCounter | None = None) -> np.ndarray:
    """Batched product of ``a`` (B, m, k) with ``b`` (B, k, n).

    ``a`` may also be a single (m, k) matrix shared across the batch; the MAC
    count is the same either way since every batch entry does the full work.
    """
    if a.ndim not in (2, 3) or b.ndim != 3 or a.shape[-1] != b.shape[1]:
        raise DimensionError(f"cannot batch-multiply {a.shape} by {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"batch extents differ: {a.shape} vs {b.shape}")
    if counter is not None:
        counter.add(b.shape[0] * a.shape[-2] * a.shape[-1] * b.shape[2])
    return np.matmul(a, b)


def permute(a: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    return np.transpose(a, axes)


def inverse_permutation(axes: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(axes)
    for i, ax in enumerate(axes):
        inv[ax] = i
    return tuple(inv)


def rms(a) -> float:
    a = as_tensor(a)
    if a.size == 0:
        raise DomainError("rms of an empty tensor is undefined")
    return float(np.sqrt(np.mean(a * a)))


def gaussian(shape, mean: float = 0.0, std: float = 1.0, seed: int = 0) -> np.ndarray:
    if std < 0:
        raise DomainError(f"standard deviation must be non-negative, got {std}")
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    else:
        shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise DimensionError(f"invalid shape {shape}")
    return rng(seed).normal(mean, std, size=shape)


def rng(seed: int) -> np.random.Generator:
    """Seeded Philox stream used for every random draw in the package."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self, k: int | None = None) -> np.ndarray:
        k = self.s.shape[-1] if k is None else k
        u = self.u[..., :k]
        v = self.v[..., :k]
        return (u * self.s[..., None, :k]) @ np.swapaxes(v, -1, -2)


def svd(a, max_sweeps: int = JACOBI_MAX_SWEEPS, tol: float = JACOBI_TOL) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Accepts a single (m, n) matrix or a stack (..., m, n); all matrices in a
    stack are rotated in lockstep. Singular values come back non-increasing
    and ``u``/``v`` always have orthonormal columns, including directions
    belonging to zero singular values.

    Raises
    ------
    NumericalError
        If some off-diagonal Gram entry is still above ``tol`` (relative)
        after ``max_sweeps`` sweeps.
    """
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"svd needs a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("svd input has non-finite entries")
    m, n = a.shape[-2:]
    flipped = m < n
    work = np.swapaxes(a, -1, -2) if flipped else a
    rows, cols = work.shape[-2:]
    batch_shape = a.shape[:-2]
    w = work.reshape(-1, rows, cols).copy()
    nb = w.shape[0]
    v = np.broadcast_to(np.eye(cols), (nb, cols, cols)).copy()
    # columns below this squared norm are rounding noise and count as zero
    tiny = (max(rows, cols) * np.finfo(np.float64).eps) ** 2 * np.einsum("bij,bij->b", w, w)

    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                ap = w[:, :, p]
                aq = w[:, :, q]
                alpha = np.einsum("bi,bi->b", ap, ap)
                beta = np.einsum("bi,bi->b", aq, aq)
                gamma = np.einsum("bi,bi->b", ap, aq)
                active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (alpha > tiny) & (beta > tiny)
                if not active.any():
                    continue
                rotated = True
                g = np.where(active, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
                c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
                s = np.where(active, c * t, 0.0)
                c = c[:, None]
                s = s[:, None]
                w[:, :, p], w[:, :, q] = c * ap - s * aq, s * ap + c * aq
                vp = v[:, :, p].copy()
                vq = v[:, :, q]
                v[:, :, p], v[:, :, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericalError("Jacobi SVD did not converge", max_sweeps)

    sing = np.sqrt(np.einsum("bij,bij->bj", w, w))
    order = np.argsort(-sing, axis=1, kind="stable")
    sing = np.take_along_axis(sing, order, axis=1)
    w = np.take_along_axis(w, order[:, None, :], axis=2)
    v = np.take_along_axis(v, order[:, None, :], axis=2)

    u = np.empty_like(w)
    for b in range(nb):
        u[b] = _normalized_columns(w[b], sing[b])

    if flipped:
        u, v = v, u
    k = min(m, n)
    return SvdResult(
        u=u.reshape(batch_shape + (m, k)),
        s=sing.reshape(batch_shape + (k,)),
        v=v.reshape(batch_shape + (n, k)),
    )


def _normalized_columns(w: np.ndarray, sing: np.ndarray) -> np.ndarray:
    rows, cols = w.shape
    cutoff = (sing[0] if cols else 0.0) * rows * np.finfo(np.float64).eps
    u = np.zeros_like(w)
    keep = sing > cutoff
    u[:, keep] = w[:, keep] / sing[keep]
    # columns for (numerically) zero singular values: complete the basis
    missing = np.flatnonzero(~keep)
    if missing.size:
        basis = [u[:, j] for j in np.flatnonzero(keep)]
        candidate = 0
        for j in missing:
            while True:
                e = np.zeros(rows)
                e[candidate % rows] = 1.0
                candidate += 1
                for _ in range(2):
                    for q in basis:
                        e -= (q @ e) * q
                norm = np.linalg.norm(e)
                if norm > 1e-8:
                    break
            u[:, j] = e / norm
            basis.append(u[:, j])
    return u
