"""Structure-aware maximal-update parameterization.

A structured layer is treated as a short chain of dense components. Each
component gets the dense muP initialization for its own fan-in/fan-out, and
the optimizer step is shared between components through per-component
learning-rate multipliers kappa_i.

For Adam the dense rule is eta = eta_0 * d_0 / d_in; a component with fan-in
d_in_i should move as if it were its own dense layer, so it gets
kappa_i = (d_in / d_in_i) * delta_i with delta_i = 1/k by default. Under SGD
the dense rule is eta proportional to d_out / d_in, which gives
kappa_i = ((d_out_i / d_in_i) / (d_out / d_in)) * delta_i.

Multipliers are kept as ``Fraction`` so closed-form values compare exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import DomainError
from .structures import StructuredMatrix
from .tensor import rng

OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class ComponentPlan:
    name: str
    shape: tuple[int, int, int]  # (batch, d_out_i, d_in_i)
    init_std: float
    nominal_std: float  # init std ignoring zero-init; the weight-norm clamp uses it
    delta: Fraction
    lr_multiplier: Fraction
    effective_lr: float
    zero_init: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "shape": list(self.shape),
            "init_std": self.init_std,
            "lr_multiplier": float(self.lr_multiplier),
            "lr_multiplier_exact": str(self.lr_multiplier),
            "effective_lr": self.effective_lr,
            "zero_init": self.zero_init,
        }


@dataclass(frozen=True)
class MuPPlan:
    family: str
    d_in: int
    d_out: int
    optimizer: str
    base_lr: float
    base_width: int
    structure_aware: bool
    components: tuple[ComponentPlan, ...]

    @property
    def k(self) -> int:
        return len(self.components)

    def multipliers(self) -> dict[str, Fraction]:
        return {c.name: c.lr_multiplier for c in self.components}

    def lrs(self) -> dict[str, float]:
        return {c.name: c.effective_lr for c in self.components}

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "components"}
        d["components"] = [c.to_dict() for c in self.components]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def dense_mup_init_std(d_in: int, d_out: int) -> float:
    """Entry std giving spectral norm of order sqrt(d_out/d_in)."""
    if d_in <= 0 or d_out <= 0:
        raise DomainError(f"dimensions must be positive, got d_in={d_in}, d_out={d_out}")
    return math.sqrt(min(d_in, d_out)) / d_in


def transfer_lr(eta_star: float, d_in_from: int, d_in_to: int) -> float:
    """Move an Adam learning rate tuned at fan-in ``d_in_from`` to ``d_in_to``."""
    if d_in_from <= 0 or d_in_to <= 0:
        raise DomainError("widths must be positive")
    return eta_star * d_in_from / d_in_to


def plan(
    m: StructuredMatrix,
    d_in: int | None = None,
    d_out: int | None = None,
    optimizer: str = "adam",
    base_lr: float = 1e-3,
    base_width: int = 64,
    last_in_residual: bool = False,
    *,
    structure_aware: bool = True,
    deltas: Sequence[Fraction | float] | None = None,
    lr_scale: Fraction | float = 1,
) -> MuPPlan:
    """Initialization and learning-rate plan for one structured layer.

    Parameters
    ----------
    m
        The layer; only its component shapes are read.
    d_in, d_out
        Layer fan-in and fan-out, by default ``m.shape``.
    last_in_residual
        Zero-initialize the last (output-side) component, as for the last
        layer of a residual branch.
    structure_aware
        With ``False`` every kappa_i is 1 (the naive dense transfer rule);
        initialization is unchanged.
    deltas
        Per-component shares; defaults to 1/k each.
    lr_scale
        Extra factor on every effective rate, e.g. a smaller rate for the
        input layer. Default 1.
    """
    if optimizer not in OPTIMIZERS:
        raise DomainError(f"unknown optimizer {optimizer!r}; expected one of {OPTIMIZERS}")
    d_out = m.d_out if d_out is None else d_out
    d_in = m.d_in if d_in is None else d_in
    comps = m.components()
    k = len(comps)
    if k == 0:
        raise DomainError("layer has no learnable components")
    if deltas is None:
        shares = [Fraction(1, k)] * k
    else:
        if len(deltas) != k:
            raise DomainError(f"expected {k} deltas, got {len(deltas)}")
        shares = [Fraction(x) for x in deltas]
    scale = Fraction(lr_scale)

    if optimizer == "adam":
        width_factor = Fraction(base_width, d_in)
    else:
        width_factor = Fraction(d_out, d_in)

    out = []
    for i, (c, delta) in enumerate(zip(comps, shares)):
        if not structure_aware:
            kappa = Fraction(1)
        elif optimizer == "adam":
            kappa = Fraction(d_in, c.d_in) * delta
        else:
            kappa = Fraction(c.d_out, c.d_in) / Fraction(d_out, d_in) * delta
        nominal = dense_mup_init_std(c.d_in, c.d_out)
        zero = last_in_residual and i == k - 1
        std = 0.0 if zero else nominal
        out.append(
            ComponentPlan(
                name=c.name,
                shape=(c.batch, c.d_out, c.d_in),
                init_std=std,
                nominal_std=nominal,
                delta=delta,
                lr_multiplier=kappa,
                effective_lr=float(Fraction(base_lr) * width_factor * kappa * scale),
                zero_init=zero,
            )
        )
    if m.family == "lowrank" and last_in_residual:
        # with u at zero, v needs full-size entries or the first update of u is tiny
        std = 1.0 / math.sqrt(d_in)
        out[0] = replace(out[0], init_std=std, nominal_std=std)
    return MuPPlan(
        family=m.family,
        d_in=d_in,
        d_out=d_out,
        optimizer=optimizer,
        base_lr=base_lr,
        base_width=base_width,
        structure_aware=structure_aware,
        components=tuple(out),
    )


def initialize(m: StructuredMatrix, p: MuPPlan, seed: int = 0) -> StructuredMatrix:
    """Fresh parameters for ``m`` drawn according to ``p``."""
    gen = rng(seed)
    params = []
    for arr, cp in zip(m.params(), p.components):
        if cp.init_std == 0.0:
            params.append(np.zeros(arr.shape))
        else:
            params.append(gen.normal(0.0, cp.init_std, size=arr.shape))
    return m.with_params(params)
