from __future__ import annotations

import pytest

from structlin.bench import bench, bench_to_csv, loglog_slope


def test_rows_sorted_and_counted():
    rows = bench(["monarch", "dense", "btt"], [64, 256, 16], repeats=3, warmup=1)
    assert [(r.family, r.flops) for r in rows] == sorted((r.family, r.flops) for r in rows)
    dense = {r.d: r.flops for r in rows if r.family == "dense"}
    assert dense[256] == 65536
    assert all(r.median_ns > 0 for r in rows)


def test_csv_layout():
    rows = bench(["dense"], [16], repeats=2, warmup=0)
    lines = bench_to_csv(rows).splitlines()
    assert lines[0] == "family,d,flops,median_ns"
    fam, d, flops, ns = lines[1].split(",")
    assert (fam, d, flops) == ("dense", "16", "256")
    assert int(ns) > 0
    assert bench_to_csv(rows, true_flops=True).splitlines()[1].split(",")[2] == "512"


@pytest.mark.slow
def test_dense_time_scales_linearly_in_flops():
    # every size is past the last-level cache so one memory regime is compared
    rows = bench(["dense"], [4096, 5792, 8192], repeats=11, warmup=2)
    slope = loglog_slope([r.flops for r in rows], [r.median_ns for r in rows])
    assert 0.7 <= slope <= 1.3
