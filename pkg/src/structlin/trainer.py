"""Residual MLP with structured layers, trained with hand-written backprop.

Architecture (activations are columns, shape (features, batch))::

    h = embed x
    h = h + w2 gelu(w1 layernorm(h))      (repeated ``depth`` times)
    logits = head h

``w1`` maps d -> 4d and ``w2`` maps 4d -> d. Every structured layer follows
its muP plan; the last component of each ``w2`` and the dense head start at
zero. Optionally every structured component is weight-normalized: its RMS
entry size is clamped to its init scale and a learnable scalar gamma
restores the lost freedom.

The coordinate check tracks the RMS change of the pre-head activation on a
fixed probe batch between consecutive optimizer steps.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .accounting import cost
from .errors import ConfigError, DimensionError, DomainError
from .mup import MuPPlan, initialize, plan
from .structures import FAMILIES, StructuredMatrix, build
from .tensor import rms, rng

LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)


# --------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    family: str = "btt"
    width: int = 64
    depth: int = 2
    lr: float = 3e-3
    base_width: int = 64
    steps: int = 200
    seed: int = 0
    weight_norm: bool = False
    structure_aware: bool = True
    optimizer: str = "adam"
    batch_size: int = 128
    probe_size: int = 256
    input_dim: int = 32
    num_classes: int = 10
    n_train: int = 4096
    separation: float = 1.0
    rank: int = 1
    cores: int = 2
    blocks: int = 4
    kernel: int = 3
    cosine: bool = False
    input_lr_scale: float = 1.0
    gamma_lr: float | None = None
    data_seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        for name in ("width", "batch_size", "probe_size", "input_dim", "num_classes", "n_train", "base_width"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.depth < 0 or self.steps < 0:
            raise ConfigError("depth and steps must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# data


def make_dataset(n: int, dim: int, classes: int, seed: int = 0, separation: float = 1.0):
    """Gaussian mixture: one unit-variance blob per class around a random mean."""
    gen = rng(seed)
    means = gen.normal(0.0, separation, size=(classes, dim))
    y = gen.integers(0, classes, size=n)
    x = means[y] + gen.normal(0.0, 1.0, size=(n, dim))
    return x, y


def load_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Features in every column but the last, integer class label in the last."""
    arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if arr.shape[1] < 2:
        raise DimensionError(f"{path}: need at least one feature column and a label column")
    y = arr[:, -1].astype(np.int64)
    if np.any(arr[:, -1] != y) or np.any(y < 0):
        raise DomainError(f"{path}: labels must be non-negative integers")
    return arr[:, :-1], y


# --------------------------------------------------------------------------
# elementwise pieces


def gelu(a: np.ndarray) -> np.ndarray:
    return 0.5 * a * (1.0 + np.tanh(GELU_C * (a + 0.044715 * a**3)))


def gelu_grad(a: np.ndarray) -> np.ndarray:
    t = np.tanh(GELU_C * (a + 0.044715 * a**3))
    return 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * a * a)


def layernorm(h, gain, bias):
    mu = h.mean(axis=0)
    xc = h - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=0) + LN_EPS)
    xh = xc * inv
    return gain[:, None] * xh + bias[:, None], (xh, inv, gain)


def layernorm_backward(cache, g):
    xh, inv, gain = cache
    gxh = g * gain[:, None]
    gh = inv * (gxh - gxh.mean(axis=0) - xh * (gxh * xh).mean(axis=0))
    return gh, (g * xh).sum(axis=1), g.sum(axis=1)


def cross_entropy(logits: np.ndarray, y: np.ndarray):
    """Mean cross-entropy of (classes, N) logits; returns (loss, dloss/dlogits)."""
    z = logits - logits.max(axis=0)
    logp = z - np.log(np.exp(z).sum(axis=0))
    n = logits.shape[1]
    loss = -float(logp[y, np.arange(n)].mean())
    g = np.exp(logp)
    g[y, np.arange(n)] -= 1.0
    return loss, g / n


# --------------------------------------------------------------------------
# weight normalization


@dataclass(frozen=True)
class WeightNormState:
    gamma: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"weight-norm scale sigma must be positive, got {self.sigma}")


def _clamp(core: np.ndarray, sigma: float) -> float:
    r = rms(core)
    return 1.0 if r <= sigma else sigma / r


def weight_normalize(core, state: WeightNormState) -> np.ndarray:
    """gamma * min(1, sigma / rms(core)) * core."""
    core = np.asarray(core, dtype=np.float64)
    return state.gamma * _clamp(core, state.sigma) * core


def weight_normalize_backward(core, state: WeightNormState, grad):
    """Pull ``dL/d(normalized core)`` back to ``(dL/dcore, dL/dgamma)``."""
    core = np.asarray(core, dtype=np.float64)
    r = rms(core)
    dot = float(np.sum(grad * core))
    if r <= state.sigma:
        return state.gamma * grad, dot
    s = state.sigma / r
    gcore = state.gamma * s * (grad - dot * core / (core.size * r * r))
    return gcore, s * dot


# --------------------------------------------------------------------------
# model


@dataclass
class Layer:
    name: str
    template: StructuredMatrix
    plan: MuPPlan
    normalized: bool

    @property
    def keys(self) -> list[str]:
        return [f"{self.name}.{c.name}" for c in self.plan.components]


@dataclass
class ResidualMLP:
    width: int
    depth: int
    input_dim: int
    num_classes: int
    layers: dict[str, Layer] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "ResidualMLP":
        d = cfg.width
        kw = dict(cores=cfg.cores, rank=cfg.rank, blocks=cfg.blocks, kernel=cfg.kernel)
        model = cls(d, cfg.depth, cfg.input_dim, cfg.num_classes)

        def add(name, family, d_out, d_in, last, normalized, lr_scale=1.0):
            template = build(family, d_out, d_in, stds=0.0, **kw)
            p = plan(
                template,
                optimizer=cfg.optimizer,
                base_lr=cfg.lr,
                base_width=cfg.base_width,
                last_in_residual=last,
                structure_aware=cfg.structure_aware,
                lr_scale=lr_scale,
            )
            model.layers[name] = Layer(name, template, p, normalized)

        wn = cfg.weight_norm
        add("embed", cfg.family, d, cfg.input_dim, False, wn, cfg.input_lr_scale)
        for i in range(cfg.depth):
            add(f"blocks.{i}.w1", cfg.family, 4 * d, d, False, wn)
            add(f"blocks.{i}.w2", cfg.family, d, 4 * d, True, wn)
        add("head", "dense", cfg.num_classes, d, True, False)
        return model

    def init_params(self, seed: int = 0) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for j, layer in enumerate(self.layers.values()):
            m = initialize(layer.template, layer.plan, seed=seed * 1000 + j)
            for key, arr in zip(layer.keys, m.params()):
                params[key] = np.array(arr)
                if layer.normalized:
                    params[key + ".gamma"] = np.array(1.0)
        for i in range(self.depth):
            params[f"blocks.{i}.ln.gain"] = np.ones(self.width)
            params[f"blocks.{i}.ln.bias"] = np.zeros(self.width)
        return params

    def learning_rates(self, cfg: TrainConfig) -> dict[str, float]:
        gamma_lr = cfg.lr if cfg.gamma_lr is None else cfg.gamma_lr
        lrs: dict[str, float] = {}
        for layer in self.layers.values():
            for key, cp in zip(layer.keys, layer.plan.components):
                lrs[key] = cp.effective_lr
                if layer.normalized:
                    lrs[key + ".gamma"] = gamma_lr
        for i in range(self.depth):
            lrs[f"blocks.{i}.ln.gain"] = cfg.lr
            lrs[f"blocks.{i}.ln.bias"] = cfg.lr
        return lrs

    def flops(self) -> int:
        """Multiply-accumulates per example through all linear layers."""
        return sum(cost(layer.template).flops for layer in self.layers.values())

    def num_params(self) -> int:
        return sum(cost(layer.template).params for layer in self.layers.values()) + 2 * self.depth * self.width

    # -- per-layer plumbing ---------------------------------------------------

    def _state(self, layer: Layer, params, key: str, i: int) -> WeightNormState:
        return WeightNormState(float(params[key + ".gamma"]), layer.plan.components[i].nominal_std)

    def effective_layer(self, name: str, params) -> StructuredMatrix:
        layer = self.layers[name]
        arrays = []
        for i, key in enumerate(layer.keys):
            m = params[key]
            if layer.normalized:
                m = weight_normalize(m, self._state(layer, params, key, i))
            arrays.append(m)
        return layer.template.with_params(arrays)

    def _apply(self, name, params, z):
        mat = self.effective_layer(name, params)
        y, cache = mat.forward(z)
        return y, (name, mat, cache)

    def _unapply(self, cache, params, gy, grads):
        name, mat, inner = cache
        layer = self.layers[name]
        gx, gcomps = mat.backward(inner, gy)
        for i, (key, g) in enumerate(zip(layer.keys, gcomps)):
            if layer.normalized:
                g, gg = weight_normalize_backward(params[key], self._state(layer, params, key, i), g)
                grads[key + ".gamma"] = np.array(gg)
            grads[key] = g
        return gx

    # -- network ------------------------------------------------------------

    def forward(self, params, x):
        """Logits (N, classes) for rows ``x`` (N, input_dim) plus a backward cache."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"expected a batch of shape (N, {self.input_dim}), got {x.shape}")
        h, c_embed = self._apply("embed", params, x.T)
        blocks = []
        for i in range(self.depth):
            p = f"blocks.{i}"
            u, c_ln = layernorm(h, params[p + ".ln.gain"], params[p + ".ln.bias"])
            a, c1 = self._apply(p + ".w1", params, u)
            o, c2 = self._apply(p + ".w2", params, gelu(a))
            h = h + o
            blocks.append((c_ln, c1, a, c2))
        logits, c_head = self._apply("head", params, h)
        cache = {"embed": c_embed, "blocks": blocks, "head": c_head, "hidden": h}
        return logits.T, cache

    def hidden(self, params, x) -> np.ndarray:
        """Pre-head activation, shape (width, N)."""
        return self.forward(params, x)[1]["hidden"]

    def backward(self, params, cache, glogits) -> dict[str, np.ndarray]:
        """Gradients for every parameter given ``dL/dlogits`` of shape (N, classes)."""
        grads: dict[str, np.ndarray] = {}
        gh = self._unapply(cache["head"], params, np.asarray(glogits).T, grads)
        for i in reversed(range(self.depth)):
            p = f"blocks.{i}"
            c_ln, c1, a, c2 = cache["blocks"][i]
            gg = self._unapply(c2, params, gh, grads)
            gu = self._unapply(c1, params, gg * gelu_grad(a), grads)
            gx, ggain, gbias = layernorm_backward(c_ln, gu)
            grads[p + ".ln.gain"] = ggain
            grads[p + ".ln.bias"] = gbias
            gh = gh + gx
        self._unapply(cache["embed"], params, gh, grads)
        return grads

    def loss_and_grads(self, params, x, y):
        logits, cache = self.forward(params, x)
        loss, g = cross_entropy(logits.T, np.asarray(y))
        return loss, self.backward(params, cache, g.T)

    def loss(self, params, x, y) -> float:
        logits, _ = self.forward(params, x)
        return cross_entropy(logits.T, np.asarray(y))[0]


# --------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def cosine_factor(step: int, total: int | None) -> float:
    """Learning-rate factor at 1-based ``step``; decays to 0 after ``total`` steps."""
    if not total:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * (step - 1) / total))


def adam_step(
    params,
    grads,
    lrs: dict[str, float] | MuPPlan,
    state: AdamState,
    step: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    total_steps: int | None = None,
):
    """One Adam update with per-parameter rates; ``step`` counts from 1."""
    if isinstance(lrs, MuPPlan):
        lrs = lrs.lrs()
    decay = cosine_factor(step, total_steps)
    out = dict(params)
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for key, g in grads.items():
        m = state.m.get(key)
        v = state.v.get(key)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        if m.shape != np.shape(g):
            raise DimensionError(f"optimizer state for {key} has shape {m.shape}, gradient {np.shape(g)}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[key], state.v[key] = m, v
        out[key] = params[key] - lrs[key] * decay * (m / c1) / (np.sqrt(v / c2) + eps)
    return out


def sgd_step(params, grads, lrs: dict[str, float], step: int = 1, total_steps: int | None = None):
    decay = cosine_factor(step, total_steps)
    out = dict(params)
    for key, g in grads.items():
        out[key] = params[key] - lrs[key] * decay * g
    return out


# --------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainRecord:
    step: int
    loss: float
    delta_h_rms: float
    activation_rms: float


RECORD_FIELDS = ("step", "loss", "delta_h_rms", "activation_rms")


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in records:
        w.writerow([r.step, _fmt(r.loss), _fmt(r.delta_h_rms), _fmt(r.activation_rms)])
    return buf.getvalue()


@dataclass
class TrainResult:
    config: TrainConfig
    model: ResidualMLP
    params: dict[str, np.ndarray]
    records: list[TrainRecord]
    diverged: bool

    @property
    def mean_delta_h_rms(self) -> float:
        vals = [r.delta_h_rms for r in self.records]
        return float(np.mean(vals)) if vals else float("nan")


def train(cfg: TrainConfig, data: tuple[np.ndarray, np.ndarray] | None = None) -> TrainResult:
    """Train on ``data`` (or the synthetic mixture) and log one record per step."""
    if data is None:
        x, y = make_dataset(cfg.n_train, cfg.input_dim, cfg.num_classes, cfg.data_seed, cfg.separation)
    else:
        x, y = (np.asarray(a) for a in data)
        if x.shape[1] != cfg.input_dim:
            raise DimensionError(f"data has {x.shape[1]} features, config expects {cfg.input_dim}")
        if y.max(initial=0) >= cfg.num_classes:
            raise DomainError(f"label {int(y.max())} out of range for {cfg.num_classes} classes")
    model = ResidualMLP.from_config(cfg)
    params = model.init_params(cfg.seed)
    lrs = model.learning_rates(cfg)
    probe = x[: cfg.probe_size]
    gen = rng(cfg.seed + 7919)
    state = AdamState()
    total = cfg.steps if cfg.cosine else None

    records: list[TrainRecord] = []
    diverged = False
    h_prev = model.hidden(params, probe)
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, cfg.steps + 1):
            idx = gen.integers(0, x.shape[0], size=cfg.batch_size)
            loss, grads = model.loss_and_grads(params, x[idx], y[idx])
            if cfg.optimizer == "adam":
                params = adam_step(params, grads, lrs, state, step, total_steps=total)
            else:
                params = sgd_step(params, grads, lrs, step, total_steps=total)
            h = model.hidden(params, probe)
            delta = float(np.sqrt(np.mean((h - h_prev) ** 2)))
            act = float(np.sqrt(np.mean(h * h)))
            records.append(TrainRecord(step, loss, delta, act))
            h_prev = h
            if not (math.isfinite(loss) and math.isfinite(act)):
                diverged = True
                break
    return TrainResult(cfg, model, params, records, diverged)


@dataclass(frozen=True)
class CoordRow:
    width: int
    mean_delta_h_rms: float
    final_loss: float
    diverged: bool


def coordinate_check(
    family: str,
    widths,
    steps: int = 100,
    structure_aware: bool = True,
    **overrides,
) -> list[CoordRow]:
    """Mean pre-head update size per width under naive or structure-aware rates."""
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise DomainError("coordinate check needs at least two widths")
    rows = []
    for w in widths:
        cfg = TrainConfig(family=family, width=w, steps=steps, structure_aware=structure_aware, **overrides)
        res = train(cfg)
        if res.diverged:
            rows.append(CoordRow(w, float("nan"), float("nan"), True))
        else:
            rows.append(CoordRow(w, res.mean_delta_h_rms, res.records[-1].loss if res.records else float("nan"), False))
    return rows


def coord_rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("width", "mean_delta_h_rms", "final_loss", "diverged"))
    for r in rows:
        w.writerow([r.width, _fmt(r.mean_delta_h_rms), _fmt(r.final_loss), int(r.diverged)])
    return buf.getvalue()


def write_text(path, text: str) -> None:
    Path(path).write_text(text)
