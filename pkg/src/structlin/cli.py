"""Command-line front end.

Subcommands write CSV (or JSON) to ``--out``; without ``--out`` they write
to ``$STRUCTLIN_OUT/<default name>`` when that variable is set, else to
stdout. Exit codes: 2 bad usage, 3 malformed config or input document,
4 file I/O failure, 5 domain or numerical error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import serialization
from .accounting import cost, reports_to_csv
from .analysis import fit_power_law
from .bench import bench, bench_to_csv
from .errors import ConfigError, StructlinError
from .projection import project_btt_recursive
from .structures import FAMILIES, build
from .tensor import rng
from .trainer import (
    ResidualMLP,
    TrainConfig,
    coord_rows_to_csv,
    coordinate_check,
    load_csv,
    make_dataset,
    records_to_csv,
    train,
)

OUT_ENV = "STRUCTLIN_OUT"
EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_DOMAIN = 2, 3, 4, 5

FAMILY_ALIASES = {"kronecker": "kron", "low-rank": "lowrank", "convolution": "conv"}


def _family(name: str) -> str:
    name = FAMILY_ALIASES.get(name, name)
    if name not in FAMILIES:
        raise argparse.ArgumentTypeError(f"unknown family {name!r}; choose from {', '.join(FAMILIES)}")
    return name


def _families(text: str) -> list[str]:
    if text == "all":
        return list(FAMILIES)
    return [_family(t.strip()) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _switch(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _emit(text: str, out: str | None, default_name: str) -> None:
    if out is None and os.environ.get(OUT_ENV):
        out = str(Path(os.environ[OUT_ENV]) / default_name)
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _structure_kw(args) -> dict:
    return dict(cores=args.cores, rank=args.rank, blocks=args.blocks, kernel=args.kernel)


# --------------------------------------------------------------------------
# subcommands


def cmd_audit(args) -> None:
    reports = []
    for family in args.family:
        for d in args.d:
            d_in = args.d_in if args.d_in else d
            reports.append(cost(build(family, d, d_in, stds=0.0, **_structure_kw(args))))
    _emit(reports_to_csv(reports, args.true_flops), args.out, "audit.csv")


def cmd_project(args) -> None:
    a = serialization.load_dense(args.input)
    ranks = args.ranks if args.ranks else [args.rank] * (args.cores - 1)
    btt, residual = project_btt_recursive(a, args.cores, ranks)
    norm = float(np.linalg.norm(a))
    report = {
        "d_out": a.shape[0],
        "d_in": a.shape[1],
        "cores": args.cores,
        "ranks": list(btt.ranks),
        "residual": residual,
        "relative_residual": residual / norm if norm > 0 else 0.0,
    }
    _emit(serialization.dumps(btt), args.out, "projection.json")
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stderr.write(text)


def _train_config(args) -> TrainConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON: {exc}") from None
        if not isinstance(base, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    flags = {
        "family": args.family,
        "width": args.d,
        "depth": args.depth,
        "lr": args.lr,
        "steps": args.steps,
        "seed": args.seed,
        "optimizer": args.optimizer,
        "structure_aware": args.structure_aware,
        "weight_norm": args.weight_norm,
        "rank": args.rank,
        "cores": args.cores,
        "blocks": args.blocks,
        "kernel": args.kernel,
    }
    base.update({k: v for k, v in flags.items() if v is not None})
    return TrainConfig.from_dict(base)


def cmd_train(args) -> None:
    cfg = _train_config(args)
    data = None
    if args.data:
        x, y = load_csv(args.data)
        cfg = TrainConfig.from_dict({**json.loads(cfg.to_json()), "input_dim": x.shape[1],
                                     "num_classes": max(cfg.num_classes, int(y.max()) + 1)})
        data = (x, y)
    result = train(cfg, data)
    _emit(records_to_csv(result.records), args.out, "train.csv")
    config_path = args.config_out
    if config_path is None and args.out:
        config_path = str(Path(args.out).with_suffix(".config.json"))
    if config_path:
        Path(config_path).write_text(cfg.to_json() + "\n")
    if result.diverged:
        sys.stderr.write(f"training diverged at step {len(result.records)}\n")


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def cmd_sweep(args) -> None:
    families = args.family or ["btt"]
    widths = args.widths or [16, 64, 256]
    common = dict(seed=args.seed if args.seed is not None else 0)
    for key in ("depth", "lr", "optimizer", "rank", "cores", "blocks", "kernel"):
        val = getattr(args, key)
        if val is not None:
            common[key] = val
    if args.weight_norm is not None:
        common["weight_norm"] = args.weight_norm
    steps = args.steps if args.steps is not None else 100

    if args.coordinate_check:
        aware = True if args.structure_aware is None else args.structure_aware
        buf = io.StringIO()
        first = True
        for family in families:
            rows = coordinate_check(family, widths, steps=steps, structure_aware=aware, **common)
            text = coord_rows_to_csv(rows)
            lines = text.splitlines(keepends=True)
            if first:
                buf.write("family,structure_aware," + lines[0])
                first = False
            for line in lines[1:]:
                buf.write(f"{family},{int(aware)},{line}")
        _emit(buf.getvalue(), args.out, "coordinate_check.csv")
        return

    # scaling grid: final loss against model compute
    aware = True if args.structure_aware is None else args.structure_aware
    rows = []
    noise = rng(common["seed"] + 1)
    for family in families:
        for w in widths:
            cfg = TrainConfig(family=family, width=w, steps=steps, structure_aware=aware, **common)
            model = ResidualMLP.from_config(cfg)
            flops = model.flops()
            if args.synthetic_alpha is not None:
                loss = args.synthetic_amplitude * flops ** (-args.synthetic_alpha)
                loss *= math.exp(noise.normal(0.0, args.synthetic_noise))
            else:
                res = train(cfg)
                x, y = make_dataset(cfg.n_train, cfg.input_dim, cfg.num_classes, cfg.data_seed, cfg.separation)
                loss = res.model.loss(res.params, x, y) if not res.diverged else float("nan")
            rows.append((family, w, flops, model.num_params(), loss))
    rows.sort(key=lambda r: (r[0], r[2], r[1]))
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(("family", "width", "flops", "params", "loss"))
    for family, w, flops, params, loss in rows:
        wr.writerow([family, w, 2 * flops if args.true_flops else flops, params, _fmt(loss)])
    _emit(buf.getvalue(), args.out, "scaling.csv")


X_COLUMNS = ("compute", "flops", "C")
Y_COLUMNS = ("error", "loss", "E")


def cmd_fit(args) -> None:
    try:
        with open(args.input, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            xcol = args.x_col or next((c for c in X_COLUMNS if c in header), None)
            ycol = args.y_col or next((c for c in Y_COLUMNS if c in header), None)
            if xcol not in header or ycol not in header:
                raise ConfigError(f"{args.input}: need compute and error columns, found {header}")
            points = []
            for row in reader:
                if args.family and row.get("family") not in args.family:
                    continue
                points.append((float(row[xcol]), float(row[ycol])))
    except ValueError as exc:
        if isinstance(exc, StructlinError):
            raise
        raise ConfigError(f"{args.input}: {exc}") from None
    fit = fit_power_law(points)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(("alpha", "amplitude", "alpha_stderr", "n_points"))
    wr.writerow([_fmt(fit.alpha), _fmt(fit.amplitude), _fmt(fit.alpha_stderr), fit.n_points])
    _emit(buf.getvalue(), args.out, "fit.csv")


def cmd_bench(args) -> None:
    kw = _structure_kw(args)
    rows = bench(args.family or ["dense", "btt"], args.sizes, repeats=args.repeats, seed=args.seed or 0, **kw)
    _emit(bench_to_csv(rows, args.true_flops), args.out, "bench.csv")


# --------------------------------------------------------------------------
# parser


def _add_structure(p, defaults: bool = True) -> None:
    p.add_argument("--cores", type=int, default=2 if defaults else None, help="number of cores c (tt/btt)")
    p.add_argument("--rank", type=int, default=1 if defaults else None, help="rank r (lowrank/tt/btt)")
    p.add_argument("--blocks", type=int, default=4 if defaults else None, help="number of blocks b (monarch)")
    p.add_argument("--kernel", type=int, default=3 if defaults else None, help="kernel size (conv)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structlin", description="Structured linear layers: costs, projection, training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit", help="FLOP and parameter table for a grid of configurations")
    p.add_argument("--family", type=_families, default=list(FAMILIES), help="family or comma list, or 'all'")
    p.add_argument("--d", type=_ints, default=[64], help="width(s), comma separated")
    p.add_argument("--d-in", type=int, default=None, help="input width for rectangular layers")
    _add_structure(p)
    p.add_argument("--true-flops", action="store_true", help="report 2x MACs")
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("project", help="project a dense matrix onto a block tensor-train")
    p.add_argument("input", help="dense matrix as CSV, or a saved structure (.json)")
    p.add_argument("--cores", type=int, default=2)
    p.add_argument("--rank", type=int, default=1)
    p.add_argument("--ranks", type=_ints, default=None, help="per-position ranks r_1..r_(c-1)")
    p.add_argument("--out", help="where to write the projected structure (JSON)")
    p.add_argument("--report", help="where to write the residual report (JSON); default stderr")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("train", help="train one residual MLP and log per-step records")
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--data", help="CSV of features with an integer label in the last column")
    p.add_argument("--family", type=_family, default=None)
    p.add_argument("--d", type=int, default=None, help="width")
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=None)
    p.add_argument("--structure-aware", type=_switch, default=None, metavar="{on,off}")
    p.add_argument("--weight-norm", type=_switch, default=None, metavar="{on,off}")
    _add_structure(p, defaults=False)
    p.add_argument("--out", help="records CSV")
    p.add_argument("--config-out", help="run config JSON (default: next to --out)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="coordinate check or compute scaling grid")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--coordinate-check", action="store_true")
    mode.add_argument("--scaling", action="store_true")
    p.add_argument("--family", type=_families, default=None)
    p.add_argument("--widths", type=_ints, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=None)
    p.add_argument("--structure-aware", type=_switch, default=None, metavar="{on,off}")
    p.add_argument("--weight-norm", type=_switch, default=None, metavar="{on,off}")
    _add_structure(p, defaults=False)
    p.add_argument("--synthetic-alpha", type=float, default=None,
                   help="skip training; losses follow amplitude * flops**(-alpha) with log-normal noise")
    p.add_argument("--synthetic-amplitude", type=float, default=10.0)
    p.add_argument("--synthetic-noise", type=float, default=0.01)
    p.add_argument("--true-flops", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit", help="power-law fit of error against compute from a CSV")
    p.add_argument("input")
    p.add_argument("--x-col", default=None, help="compute column (default: compute, flops or C)")
    p.add_argument("--y-col", default=None, help="error column (default: error, loss or E)")
    p.add_argument("--family", type=_families, default=None, help="keep only rows of these families")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bench", help="median MVM wall time against FLOPs")
    p.add_argument("--family", type=_families, default=None)
    p.add_argument("--sizes", type=_ints, default=[256, 1024])
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    _add_structure(p)
    p.add_argument("--true-flops", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"structlin: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"structlin: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except StructlinError as exc:
        print(f"structlin: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    return 0


if __name__ == "__main__":
    sys.exit(main())
