"""Projection of dense matrices onto block tensor-trains, and rank bounds.

For two cores the best rank-r BTT in Frobenius norm splits into independent
problems: for every pair (block output index i', block input index j) the
(m_1 x n_2) slice A[:, i', j, :] gets its own truncated SVD. More cores are
handled greedily, peeling off the last core and recursing on what is left,
which is exact at the rank bounds but not optimal below them.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError
from .structures import AxisFactorization, BlockTensorTrain, balanced_factorization, btt_rank_bounds
from .tensor import svd


def _factors(f) -> tuple[int, ...]:
    return tuple(f.factors) if isinstance(f, AxisFactorization) else tuple(int(x) for x in f)


def _exact_root(d: int, c: int) -> int | None:
    k = round(d ** (1.0 / c))
    for cand in (k - 1, k, k + 1):
        if cand > 0 and cand**c == d:
            return cand
    return None


def btt_rank_bound(t: int, c: int, d: int) -> int:
    """Largest BTT rank r_t that is not redundant for a d x d matrix with c cores."""
    if not 1 <= t <= c - 1:
        raise DomainError(f"rank position t={t} must lie in [1, {c - 1}]")
    k = _exact_root(d, c)
    if k is not None:
        return k ** min(t, c - t)
    fac = balanced_factorization(d, c).factors
    return btt_rank_bounds(fac, fac)[t - 1]


def tt_rank_bound(t: int, c: int, d: int) -> int:
    """Largest TT rank r_t that is not redundant for a d x d matrix with c cores."""
    if not 1 <= t <= c - 1:
        raise DomainError(f"rank position t={t} must lie in [1, {c - 1}]")
    k = _exact_root(d, c)
    if k is not None:
        return min(k ** (2 * min(t, c - t)), d)
    fac = balanced_factorization(d, c).factors
    left = math.prod(fac[:t]) ** 2
    right = math.prod(fac[t:]) ** 2
    return min(left, right, d)


def _greedy(a: np.ndarray, m: tuple[int, ...], n: tuple[int, ...], ranks: Sequence[int]):
    c = len(m)
    if len(n) != c:
        raise DimensionError(f"output factors {m} and input factors {n} differ in length")
    if len(ranks) != c - 1:
        raise DimensionError(f"expected {c - 1} ranks, got {len(ranks)}")
    if a.shape != (math.prod(m), math.prod(n)):
        raise DimensionError(f"matrix of shape {a.shape} does not match factors {m} x {n}")

    # left tensor axes: i_1..i_c, j_1..j_{t+1}, rank
    left = a.reshape(m + n)[..., None]
    r_next = 1
    cores: list[np.ndarray | None] = [None] * c
    for t in range(c - 1, 0, -1):
        rows = math.prod(m[:t])
        cols = n[t] * r_next
        rk = int(ranks[t - 1])
        bound = min(rows, cols)
        if not 1 <= rk <= bound:
            raise DomainError(
                f"rank r_{t}={rk} is outside [1, {bound}]; ranks above the bound "
                f"min(m_1*...*m_t, n_(t+1)*r_(t+1)) only add redundancy"
            )
        perm = list(range(t, c)) + list(range(c, c + t)) + list(range(t)) + [c + t, c + t + 1]
        batch_dims = m[t:] + n[:t]
        slices = left.transpose(perm).reshape(-1, rows, cols)
        dec = svd(slices)
        root = np.sqrt(dec.s[:, :rk])
        us = dec.u[:, :, :rk] * root[:, None, :]
        vs = dec.v[:, :, :rk] * root[:, None, :]

        # core t+1 logical axes: (r_t, m_{t+1}, m_{t+2..c}, n_{1..t}, n_{t+1}, r_{t+1})
        vr = vs.reshape(batch_dims + (n[t], r_next, rk))
        nb = len(batch_dims)
        cores[t] = vr.transpose((nb + 2,) + tuple(range(nb)) + (nb, nb + 1))

        # remaining left part: (i_1..i_c, j_1..j_t, r_t)
        ur = us.reshape(batch_dims + m[:t] + (rk,))
        order = (
            tuple(range(nb, nb + t))  # i_1..i_t
            + tuple(range(c - t))  # i_{t+1}..i_c
            + tuple(range(c - t, nb))  # j_1..j_t
            + (nb + t,)
        )
        left = ur.transpose(order)
        r_next = rk
    cores[0] = left[None]
    btt = BlockTensorTrain.from_logical(cores)
    residual = float(np.linalg.norm(a - btt.materialize(cap=max(a.size, 1))))
    return btt, residual


def project_btt_2core(
    a,
    out_fac: AxisFactorization | Sequence[int],
    in_fac: AxisFactorization | Sequence[int],
    r: int,
) -> tuple[BlockTensorTrain, float]:
    """Closest rank-``r`` two-core BTT to ``a`` in Frobenius norm.

    Singular values are split evenly (square roots) between the two cores.
    Returns the BTT and the Frobenius norm of the residual.
    """
    a = np.asarray(a, dtype=np.float64)
    m, n = _factors(out_fac), _factors(in_fac)
    if len(m) != 2 or len(n) != 2:
        raise DimensionError("two-core projection needs two output and two input factors")
    return _greedy(a, m, n, [r])


def project_btt_recursive(
    a,
    c: int,
    ranks: Sequence[int],
    out_fac: AxisFactorization | Sequence[int] | None = None,
    in_fac: AxisFactorization | Sequence[int] | None = None,
) -> tuple[BlockTensorTrain, float]:
    """Greedy c-core BTT projection; the residual is measured against ``a``."""
    a = np.asarray(a, dtype=np.float64)
    if c < 2:
        raise DomainError(f"need at least 2 cores, got {c}")
    m = _factors(out_fac) if out_fac is not None else balanced_factorization(a.shape[0], c).factors
    n = _factors(in_fac) if in_fac is not None else balanced_factorization(a.shape[1], c).factors
    return _greedy(a, m, n, ranks)
