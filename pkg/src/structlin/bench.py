"""Wall-clock timing of structured multiplies against their FLOP counts."""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .accounting import cost
from .structures import build
from .tensor import rng


@dataclass(frozen=True)
class BenchRow:
    family: str
    d: int
    flops: int
    median_ns: int


def time_mvm(m, x, repeats: int = 20, warmup: int = 3) -> int:
    """Median nanoseconds of ``repeats`` multiplies after ``warmup`` untimed ones."""
    for _ in range(warmup):
        m.mvm(x)
    times = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter_ns()
        m.mvm(x)
        times.append(time.perf_counter_ns() - t0)
    return int(statistics.median(times))


def bench(families, sizes, repeats: int = 20, warmup: int = 3, seed: int = 0, **structure_kw) -> list[BenchRow]:
    rows = []
    for family in families:
        for d in sizes:
            m = build(family, d, d, seed=seed, **structure_kw)
            x = rng(seed + 1).normal(size=d)
            rows.append(BenchRow(family, d, cost(m).flops, time_mvm(m, x, repeats, warmup)))
    rows.sort(key=lambda r: (r.family, r.flops, r.d))
    return rows


def bench_to_csv(rows, true_flops: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("family", "d", "flops", "median_ns"))
    for r in rows:
        w.writerow([r.family, r.d, 2 * r.flops if true_flops else r.flops, r.median_ns])
    return buf.getvalue()


def loglog_slope(flops, times) -> float:
    x = np.log(np.asarray(flops, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])
