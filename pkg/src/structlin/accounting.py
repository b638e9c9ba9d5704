"""FLOP and parameter accounting.

A "FLOP" here is one multiply-accumulate, so a d x d dense matrix-vector
product costs d**2. Reshapes, permutations and residual additions are free.
Bias terms do not exist anywhere in the package and are never counted.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .structures import (
    BlockTensorTrain,
    Convolution,
    Dense,
    Kronecker,
    LowRank,
    Monarch,
    StructuredMatrix,
    TensorTrain,
)
from .tensor import MacCounter

CSV_FIELDS = ("family", "d_out", "d_in", "c", "rank", "blocks", "flops", "params", "xi")


@dataclass(frozen=True)
class CostReport:
    family: str
    width_out: int
    width_in: int
    flops: int
    params: int
    cores: int = 1
    rank: int = 0
    blocks: int = 0

    @property
    def xi(self) -> Fraction:
        """Compute per dimension: MVM cost divided by the layer width."""
        return Fraction(self.flops, max(self.width_in, self.width_out))

    def scaled(self, true_flops: bool) -> int:
        return 2 * self.flops if true_flops else self.flops

    def csv_row(self, true_flops: bool = False) -> list:
        flops = self.scaled(true_flops)
        xi = Fraction(flops, max(self.width_in, self.width_out))
        return [
            self.family,
            self.width_out,
            self.width_in,
            self.cores,
            self.rank,
            self.blocks,
            flops,
            self.params,
            f"{float(xi):.17g}",
        ]


def reports_to_csv(reports, true_flops: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for rep in reports:
        writer.writerow(rep.csv_row(true_flops))
    return buf.getvalue()


def _exact_root(d: int, c: int) -> int | None:
    k = round(d ** (1.0 / c))
    for cand in (k - 1, k, k + 1):
        if cand > 0 and cand**c == d:
            return cand
    return None


def _train_counts(m) -> tuple[int, int]:
    """Exact sums over the core contractions of a TT/BTT chain."""
    mo, ni, r = m.out_factors, m.in_factors, m.full_ranks()
    flops = params = 0
    for t in range(1, m.c + 1):
        core = r[t - 1] * mo[t - 1] * ni[t - 1] * r[t]
        batch = math.prod(mo[t:]) * math.prod(ni[:t - 1])
        flops += batch * core
        params += core if isinstance(m, TensorTrain) else batch * core
    return flops, params


def cost(m: StructuredMatrix) -> CostReport:
    """Closed-form MAC and parameter counts for one multiply by ``m``."""
    d_out, d_in = m.shape
    base = dict(family=m.family, width_out=d_out, width_in=d_in)
    square = d_out == d_in

    if isinstance(m, Dense):
        n = d_out * d_in
        return CostReport(flops=n, params=n, **base)
    if isinstance(m, LowRank):
        r = m.rank
        n = 2 * r * d_out if square else r * (d_out + d_in)
        return CostReport(flops=n, params=n, rank=r, **base)
    if isinstance(m, Convolution):
        p = m.p
        return CostReport(flops=p * d_out, params=p, **base)
    if isinstance(m, Kronecker):
        (m1, n1), (m2, n2) = m.l.shape, m.r.shape
        if square and m1 == m2 == n1 == n2:
            k = m1  # sqrt(d)
            return CostReport(flops=2 * k**3, params=2 * k**2, cores=2, rank=1, **base)
        flops = n1 * m2 * n2 + m2 * m1 * n1
        return CostReport(flops=flops, params=m1 * n1 + m2 * n2, cores=2, rank=1, **base)
    if isinstance(m, Monarch):
        b = m.blocks
        if square and m.d_mid == d_out:
            n = 2 * d_out * d_out // b
        else:
            n = (m.d_mid // b) * (d_in + d_out)
        return CostReport(flops=n, params=n, blocks=b, **base)
    if isinstance(m, (TensorTrain, BlockTensorTrain)):
        c = m.c
        ranks = set(m.ranks)
        k = _exact_root(d_out, c) if square else None
        uniform = (
            k is not None
            and len(ranks) == 1
            and set(m.out_factors) == {k}
            and set(m.in_factors) == {k}
        )
        rank = max(m.ranks)
        if uniform:
            r = rank
            lead = 2 * r + (c - 2) * r * r
            flops = lead * k ** (c + 1)
            params = flops if isinstance(m, BlockTensorTrain) else lead * k**2
        else:
            flops, params = _train_counts(m)
        return CostReport(flops=flops, params=params, cores=c, rank=rank, **base)
    raise TypeError(f"no cost model for {type(m).__name__}")


def measured_flops(m: StructuredMatrix, x) -> int:
    """Run the real multiply with a MAC counter attached and return the count."""
    counter = MacCounter()
    m.mvm(np.asarray(x, dtype=np.float64), counter)
    return counter.count
