"""Acceptance suite: one test per criterion, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v`` or directly as a script.
A ``ACCEPTANCE n name: PASS|FAIL`` line per criterion is printed at the end
of the session by the hook in ``conftest.py``.
"""
from __future__ import annotations

import math
import sys
from fractions import Fraction

import numpy as np
import pytest

from structlin.accounting import cost, measured_flops
from structlin.analysis import fit_power_law
from structlin.cli import main as cli_main
from structlin.mup import plan, transfer_lr
from structlin.projection import project_btt_2core
from structlin.structures import FAMILIES, build
from structlin.tensor import rms
from structlin.trainer import (
    ResidualMLP,
    TrainConfig,
    WeightNormState,
    coordinate_check,
    make_dataset,
    train,
    weight_normalize,
)

SIZES = [1, 2, 3, 4, 6, 8, 9, 12, 16, 18, 24, 27, 32, 36, 48, 64]


def random_instance(family, g):
    d_out, d_in = (int(s) for s in g.choice(SIZES, 2))
    kw = {}
    if family == "monarch":
        b = math.gcd(d_out, d_in)
        kw["blocks"] = int(g.choice([x for x in range(1, 9) if b % x == 0]))
    elif family in ("tt", "btt"):
        kw = {"cores": int(g.integers(2, 4)), "rank": int(g.integers(1, 5))}
    elif family == "lowrank":
        kw["rank"] = int(g.integers(1, 9))
    elif family == "conv":
        kw["kernel"] = int(g.integers(1, min(d_in, 7) + 1))
    return build(family, d_out, d_in, seed=int(g.integers(1 << 31)), stds=float(g.uniform(0.1, 2.0)), **kw)


def test_criterion_01_oracle_equivalence():
    g = np.random.default_rng(2024)
    worst = 0.0
    for family in FAMILIES:
        for _ in range(100):
            m = random_instance(family, g)
            a = m.materialize()
            x = g.normal(size=a.shape[1])
            scale = max(1.0, float(np.abs(a).max() * np.abs(x).sum()))
            worst = max(worst, float(np.abs(m.mvm(x) - a @ x).max()) / scale)
    print(f"max error / scale = {worst:.3e}")
    assert worst <= 1e-9


def test_criterion_02_flop_identity():
    g = np.random.default_rng(7)
    for i in range(50):
        m = random_instance(FAMILIES[i % len(FAMILIES)], g)
        rep = cost(m)
        assert measured_flops(m, np.ones(m.d_in)) == rep.flops, (rep, m.meta())
    examples = [
        (("dense", 64, {}), 4096),
        (("monarch", 64, {"blocks": 4}), 2048),
        (("kron", 64, {}), 1024),
        (("tt", 64, {"cores": 3, "rank": 2}), 2048),
    ]
    for (family, d, kw), flops in examples:
        m = build(family, d, d, **kw)
        assert cost(m).flops == flops
        assert measured_flops(m, np.ones(d)) == flops


def _als_residual(a, k, r, seed, iters=60):
    g = np.random.default_rng(seed)
    total = 0.0
    for s in a.reshape(k, k, k, k).transpose(1, 2, 0, 3).reshape(-1, k, k):
        v = g.normal(size=(k, r))
        for _ in range(iters):
            u = np.linalg.lstsq(v, s.T, rcond=None)[0].T
            v = np.linalg.lstsq(u, s, rcond=None)[0].T
        total += np.sum((s - u @ v.T) ** 2)
    return float(np.sqrt(total))


def test_criterion_03_projection_exactness():
    g = np.random.default_rng(3)
    for _ in range(10):
        _, res = project_btt_2core(g.normal(size=(4, 4)), (2, 2), (2, 2), 2)
        assert res <= 1e-9
        _, res = project_btt_2core(g.normal(size=(16, 16)), (4, 4), (4, 4), 4)
        assert res <= 1e-9
    for _ in range(10):
        a = g.normal(size=(16, 16))
        res = [project_btt_2core(a, (4, 4), (4, 4), r)[1] for r in (1, 2, 3, 4)]
        assert all(x >= y for x, y in zip(res, res[1:]))
    for trial in range(20):
        a = g.normal(size=(16, 16))
        r = 1 + trial % 3
        closed = project_btt_2core(a, (4, 4), (4, 4), r)[1]
        assert closed <= _als_residual(a, 4, r, seed=trial) + 1e-7


def test_criterion_04_mup_multiplier_table():
    def kappas(family, d, **kw):
        return {c.name: c.lr_multiplier for c in plan(build(family, d, d, stds=0.0, **kw)).components}

    for d in (16, 64, 256):
        k = math.isqrt(d)
        for r in (1, 2, 4):
            assert kappas("lowrank", d, rank=r) == {"u": Fraction(d, 2 * r), "v": Fraction(1, 2)}
            if r <= k:
                for family in ("tt", "btt"):
                    assert kappas(family, d, rank=r) == {"g1": Fraction(k, 2 * r), "g2": Fraction(k, 2)}
        assert kappas("kron", d) == {"l": Fraction(k, 2), "r": Fraction(k, 2)}
        for b in (1, 2, 4, 8):
            assert kappas("monarch", d, blocks=b) == {"l": Fraction(b, 2), "r": Fraction(b, 2)}
    for values in [kappas("kron", 64), kappas("btt", 256, rank=2)]:
        assert all(isinstance(v, Fraction) for v in values.values())


def _max_fd_error(model, params, x, y, step=1e-5):
    _, grads = model.loss_and_grads(params, x, y)
    worst = 0.0
    for key, value in params.items():
        flat = np.array(value, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            def at(eps):
                arr = flat.copy()
                arr[i] += eps
                return model.loss({**params, key: arr.reshape(np.shape(value))}, x, y)

            fd = (at(step) - at(-step)) / (2 * step)
            an = float(np.reshape(grads[key], -1)[i])
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def test_criterion_05_gradient_correctness():
    worst = {}
    for family in FAMILIES:
        for wn in (False, True):
            cfg = TrainConfig(family=family, width=8, depth=2, input_dim=8, num_classes=3, rank=2, weight_norm=wn)
            model = ResidualMLP.from_config(cfg)
            g = np.random.default_rng(5)
            params = {
                k: (np.array(1.0 + g.uniform(0.1, 0.5)) if k.endswith(".gamma") else v + 0.3 * g.normal(size=np.shape(v)))
                for k, v in model.init_params(5).items()
            }
            x, y = make_dataset(6, 8, 3, seed=5)
            worst[(family, wn)] = _max_fd_error(model, params, x, y)
    print({f"{f}{'+wn' if wn else ''}": f"{e:.1e}" for (f, wn), e in worst.items()})
    assert max(worst.values()) <= 1e-4


def test_criterion_06_coordinate_check():
    widths = (16, 64, 256)
    for family in ("kron", "btt"):
        naive = [r.mean_delta_h_rms for r in coordinate_check(family, widths, steps=100, structure_aware=False, lr=3e-3)]
        aware = [r.mean_delta_h_rms for r in coordinate_check(family, widths, steps=100, structure_aware=True, lr=3e-3)]
        print(f"{family}: naive {naive} aware {aware} ratio {max(aware) / min(aware):.3f}")
        assert all(a > b for a, b in zip(naive, naive[1:]))
        assert max(aware) / min(aware) <= 10


def test_criterion_07_weight_normalization():
    g = np.random.default_rng(11)
    for _ in range(200):
        core = g.normal(size=tuple(g.integers(1, 9, size=3))) * g.uniform(1e-3, 1e3)
        st = WeightNormState(gamma=float(g.uniform(-4, 4)), sigma=float(g.uniform(1e-2, 10)))
        got = rms(weight_normalize(core, st))
        assert got == pytest.approx(abs(st.gamma) * min(rms(core), st.sigma), rel=1e-13)

    peaks = {}
    for wn in (False, True):
        cfg = TrainConfig(family="btt", width=32, lr=1e-2, steps=2000, weight_norm=wn)
        res = train(cfg)
        peaks[wn] = max(r.activation_rms for r in res.records) if not res.diverged else float("inf")
    print(f"peak pre-head RMS: control {peaks[False]:.2f}, normalized {peaks[True]:.2f}")
    assert peaks[False] > 10
    assert peaks[True] <= 10


def test_criterion_08_power_law_fitter():
    c = np.logspace(2, 8, 20)
    exact = fit_power_law(zip(c, 2.0 * c**-0.5))
    assert abs(exact.alpha - 0.5) <= 1e-12
    g = np.random.default_rng(0)
    c = np.logspace(3, 9, 50)
    noisy = fit_power_law(zip(c, c**-0.3 * np.exp(g.normal(0.0, 0.01, size=50))))
    assert 0.28 <= noisy.alpha <= 0.32


def test_criterion_09_lr_transfer_arithmetic():
    assert transfer_lr(3e-3, 64, 256) == 7.5e-4
    for family, kw in (("kron", {}), ("monarch", {"blocks": 4}), ("btt", {"rank": 2})):
        for d in (16, 64, 256):
            p = plan(build(family, d, d, stds=0.0, **kw), base_lr=3e-3, base_width=64)
            for comp in p.components:
                assert comp.effective_lr == float(Fraction(3e-3) * Fraction(64, d) * comp.lr_multiplier)


def test_criterion_10_determinism(tmp_path, capsys):
    runs = [
        ["train", "--family", "btt", "--d", "32", "--steps", "20", "--seed", "4"],
        ["train", "--family", "kron", "--d", "16", "--steps", "20", "--seed", "4", "--weight-norm", "on",
         "--optimizer", "sgd", "--lr", "0.05"],
        ["sweep", "--coordinate-check", "--family", "kron,btt", "--widths", "16,64", "--steps", "10"],
        ["sweep", "--scaling", "--family", "dense,monarch", "--widths", "16,32", "--steps", "10"],
    ]
    for i, argv in enumerate(runs):
        outs = []
        for rep in range(2):
            path = tmp_path / f"{i}_{rep}.csv"
            assert cli_main([*argv, "--out", str(path)]) == 0
            outs.append(path.read_bytes())
        assert outs[0] == outs[1], argv
        assert outs[0].count(b"\n") >= 3
    capsys.readouterr()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s", "-p", "no:cacheprovider"]))
