"""Structured matrix families with matrix-free multiplies.

Every family computes ``y = W x`` as a short chain of (batched) dense
products interleaved with reshapes and axis permutations. Inputs are
reshaped row-major, so for a Kronecker product ``L (x) R`` the factor ``L``
acts on the most significant index. Dense materialization goes through an
independent route (``np.kron``, explicit permutation matrices, or an einsum
over the core tensors) and exists mainly as a test oracle.

Learnable components are always listed in the order they are applied in the
multiply: the first component touches the input and the last one produces
the output. This is the order the muP planner relies on when it
zero-initializes the final component of a residual branch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import ClassVar, Sequence

import numpy as np

from .errors import DimensionError, DomainError, ResourceError
from .tensor import MacCounter, bmm, inverse_permutation, rng

MATERIALIZE_CAP = 2**20

FAMILIES = ("dense", "lowrank", "conv", "kron", "monarch", "tt", "btt")


# --------------------------------------------------------------------------
# axis factorizations


@dataclass(frozen=True)
class AxisFactorization:
    total: int
    factors: tuple[int, ...]

    def __post_init__(self):
        if math.prod(self.factors) != self.total:
            raise DomainError(f"factors {self.factors} do not multiply to {self.total}")

    def __len__(self):
        return len(self.factors)


def _ordered_factorizations(d: int, c: int, lo: int = 1):
    if c == 1:
        if d >= lo:
            yield (d,)
        return
    f = lo
    while f**c <= d:
        if d % f == 0:
            for rest in _ordered_factorizations(d // f, c - 1, f):
                yield (f,) + rest
        f += 1


def balanced_factorization(d: int, c: int) -> AxisFactorization:
    """Split ``d`` into ``c`` non-decreasing factors that are as close as possible.

    Closeness is the ratio of the largest to the smallest factor; ties go to
    the lexicographically smallest tuple.

    >>> balanced_factorization(20, 2).factors
    (4, 5)
    """
    if d < 1 or c < 1:
        raise DomainError(f"need d >= 1 and c >= 1, got d={d}, c={c}")
    best = min(
        _ordered_factorizations(d, c),
        key=lambda fs: (Fraction(fs[-1], fs[0]), fs),
    )
    return AxisFactorization(d, best)


def btt_rank_bounds(out_factors: Sequence[int], in_factors: Sequence[int]) -> tuple[int, ...]:
    """Largest useful rank r_1..r_{c-1} for a BTT with the given factors.

    Uses r_t <= min(m_1 * ... * m_t, n_{t+1} * r_{t+1}) with r_c = 1.
    """
    c = len(out_factors)
    bounds = [1] * (c + 1)
    for t in range(c - 1, 0, -1):
        bounds[t] = min(math.prod(out_factors[:t]), in_factors[t] * bounds[t + 1])
    return tuple(bounds[1:c])


def clipped_ranks(rank: int | Sequence[int], out_factors, in_factors) -> tuple[int, ...]:
    c = len(out_factors)
    wanted = [rank] * (c - 1) if isinstance(rank, (int, np.integer)) else list(rank)
    if len(wanted) != c - 1:
        raise DimensionError(f"expected {c - 1} ranks, got {len(wanted)}")
    ranks = [1] * (c + 1)
    for t in range(c - 1, 0, -1):
        ranks[t] = min(int(wanted[t - 1]), math.prod(out_factors[:t]), in_factors[t] * ranks[t + 1])
    return tuple(ranks[1:c])


# --------------------------------------------------------------------------
# contraction chains


@dataclass(frozen=True)
class _Stage:
    """One batched product in a multiply chain.

    The incoming flat activation of shape (D, N) is reshaped to
    ``pre_shape + (N,)``, permuted by ``pre_axes`` and viewed as
    (batch, cols, N) before being hit by the core matrix.
    """

    pre_shape: tuple[int, ...]
    pre_axes: tuple[int, ...]
    param: int
    batch: int
    rows: int
    cols: int
    shared: bool


@dataclass(frozen=True)
class DenseComponent:
    name: str
    index: int
    batch: int
    d_out: int
    d_in: int
    array: np.ndarray = field(repr=False, compare=False)

    @property
    def size(self) -> int:
        return self.batch * self.d_out * self.d_in


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.flags.writeable = False
    return arr


class StructuredMatrix:
    """Common multiply/backprop machinery for all families."""

    family: ClassVar[str]
    names: ClassVar[tuple[str, ...]] = ()

    # subclasses provide: shape, params(), meta(), from_meta(), _stages(), _post(),
    # _component_dims(), _materialize()

    @property
    def d_out(self) -> int:
        return self.shape[0]

    @property
    def d_in(self) -> int:
        return self.shape[1]

    def component_names(self) -> tuple[str, ...]:
        return self.names

    def with_params(self, params: Sequence[np.ndarray]) -> "StructuredMatrix":
        return type(self).from_meta(self.meta(), params)

    def components(self) -> list[DenseComponent]:
        return [
            DenseComponent(name, i, b, o, n, arr)
            for i, (name, (b, o, n), arr) in enumerate(
                zip(self.component_names(), self._component_dims(), self.params())
            )
        ]

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    # -- multiplies --------------------------------------------------------

    def mvm(self, x, counter: MacCounter | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1 or x.shape[0] != self.d_in:
            raise DimensionError(f"{self.family} matrix of shape {self.shape} cannot act on vector of shape {x.shape}")
        return self.mvm_batched(x[:, None], counter)[:, 0]

    def mvm_batched(self, x, counter: MacCounter | None = None) -> np.ndarray:
        y, _ = self.forward(x, counter)
        return y

    def forward(self, x, counter: MacCounter | None = None):
        """Multiply a (d_in, N) block of columns; also return what backward needs."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != self.d_in:
            raise DimensionError(f"{self.family} matrix of shape {self.shape} cannot act on block of shape {x.shape}")
        n = x.shape[1]
        params = self.params()
        z = x
        saved = []
        for st in self._stages():
            zz = z.reshape(st.pre_shape + (n,))
            zz = zz.transpose(st.pre_axes + (len(st.pre_axes),)).reshape(st.batch, st.cols, n)
            saved.append(zz)
            core = self._core(params, st)
            z = bmm(core, zz, counter).reshape(-1, n)
        post_shape, post_axes = self._post()
        y = z.reshape(post_shape + (n,)).transpose(post_axes + (len(post_axes),)).reshape(self.d_out, n)
        return y, saved

    def backward(self, cache, gy) -> tuple[np.ndarray, list[np.ndarray]]:
        """Gradients of a scalar loss given ``dL/dy``.

        Returns ``(dL/dx, [dL/dparam, ...])`` with parameter gradients in
        component order and in the parameters' own shapes.
        """
        gy = np.asarray(gy, dtype=np.float64)
        n = gy.shape[1]
        params = self.params()
        grads = [np.zeros_like(p) for p in params]
        post_shape, post_axes = self._post()
        g = _undo_arrangement(gy, post_shape, post_axes, n)
        for st, zz in zip(reversed(self._stages()), reversed(cache)):
            gout = g.reshape(st.batch, st.rows, n)
            core = self._core(params, st)
            gcore = gout @ zz.transpose(0, 2, 1)
            if st.shared:
                gcore = gcore.sum(axis=0)
            grads[st.param] += gcore.reshape(params[st.param].shape)
            coreT = np.swapaxes(core, -1, -2)
            gz = np.matmul(coreT, gout)
            g = _undo_arrangement(gz.reshape(-1, n), st.pre_shape, st.pre_axes, n)
        return g, grads

    def _core(self, params, st: _Stage) -> np.ndarray:
        p = params[st.param]
        if st.shared:
            return p.reshape(st.rows, st.cols)
        return p.reshape(st.batch, st.rows, st.cols)

    # -- dense view ----------------------------------------------------------

    def materialize(self, cap: int = MATERIALIZE_CAP) -> np.ndarray:
        if self.d_out * self.d_in > cap:
            raise ResourceError(
                f"materializing {self.d_out}x{self.d_in} exceeds the cap of {cap} elements"
            )
        return self._materialize()

    def __repr__(self):
        extra = ", ".join(f"{k}={v}" for k, v in self.meta().items() if k != "shape")
        return f"{type(self).__name__}(shape={self.shape}, {extra})"


def _undo_arrangement(g, pre_shape, pre_axes, n):
    """Invert flat -> reshape(pre_shape) -> permute(pre_axes) on a gradient."""
    perm_shape = tuple(pre_shape[a] for a in pre_axes)
    inv = inverse_permutation(pre_axes)
    out = g.reshape(perm_shape + (n,)).transpose(inv + (len(inv),))
    return out.reshape(-1, n)


# --------------------------------------------------------------------------
# families


@dataclass(frozen=True, eq=False, repr=False)
class Dense(StructuredMatrix):
    w: np.ndarray
    family: ClassVar[str] = "dense"
    names: ClassVar[tuple[str, ...]] = ("w",)

    def __post_init__(self):
        object.__setattr__(self, "w", _frozen(self.w))
        if self.w.ndim != 2:
            raise DimensionError(f"dense weight must be 2-D, got {self.w.shape}")

    @property
    def shape(self):
        return self.w.shape

    def params(self):
        return (self.w,)

    def meta(self):
        return {"shape": list(self.shape)}

    @classmethod
    def from_meta(cls, meta, params):
        return cls(params[0])

    def _stages(self):
        o, i = self.shape
        return (_Stage((i,), (0,), 0, 1, o, i, True),)

    def _post(self):
        return (self.d_out,), (0,)

    def _component_dims(self):
        return [(1, self.d_out, self.d_in)]

    def _materialize(self):
        return np.array(self.w)


@dataclass(frozen=True, eq=False, repr=False)
class LowRank(StructuredMatrix):
    u: np.ndarray
    v: np.ndarray
    family: ClassVar[str] = "lowrank"
    names: ClassVar[tuple[str, ...]] = ("v", "u")

    def __post_init__(self):
        object.__setattr__(self, "u", _frozen(self.u))
        object.__setattr__(self, "v", _frozen(self.v))
        if self.u.ndim != 2 or self.v.ndim != 2 or self.u.shape[1] != self.v.shape[0]:
            raise DimensionError(f"low-rank factors do not chain: {self.u.shape}, {self.v.shape}")

    @property
    def rank(self):
        return self.u.shape[1]

    @property
    def shape(self):
        return (self.u.shape[0], self.v.shape[1])

    def params(self):
        return (self.v, self.u)

    def meta(self):
        return {"shape": list(self.shape), "rank": self.rank}

    @classmethod
    def from_meta(cls, meta, params):
        v, u = params
        return cls(u, v)

    def _stages(self):
        o, i = self.shape
        r = self.rank
        return (
            _Stage((i,), (0,), 0, 1, r, i, True),
            _Stage((r,), (0,), 1, 1, o, r, True),
        )

    def _post(self):
        return (self.d_out,), (0,)

    def _component_dims(self):
        return [(1, self.rank, self.d_in), (1, self.d_out, self.rank)]

    def _materialize(self):
        return self.u @ self.v


@dataclass(frozen=True, eq=False, repr=False)
class Convolution(StructuredMatrix):
    """Circular convolution: ``y_i = sum_k kernel[k] * x[(i - k) mod d_in]``.

    With ``d_out == d_in`` this is the usual wrap-around Toeplitz matrix; a
    different ``d_out`` simply keeps sliding the kernel around the input ring.
    """

    kernel: np.ndarray
    d_out_: int
    d_in_: int
    family: ClassVar[str] = "conv"
    names: ClassVar[tuple[str, ...]] = ("kernel",)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _frozen(np.ravel(self.kernel)))
        if self.kernel.size < 1 or self.d_out_ < 1 or self.d_in_ < 1:
            raise DimensionError("convolution needs a non-empty kernel and positive sizes")
        if self.kernel.size > self.d_in_:
            raise DimensionError(f"kernel length {self.kernel.size} exceeds input size {self.d_in_}")

    @classmethod
    def square(cls, kernel, d: int) -> "Convolution":
        return cls(kernel, d, d)

    @property
    def shape(self):
        return (self.d_out_, self.d_in_)

    @property
    def p(self):
        return self.kernel.size

    def params(self):
        return (self.kernel,)

    def meta(self):
        return {"shape": list(self.shape), "kernel_size": self.p}

    @classmethod
    def from_meta(cls, meta, params):
        d_out, d_in = meta["shape"]
        return cls(params[0], d_out, d_in)

    def _taps(self):
        rows = np.arange(self.d_out_)[None, :]
        lags = np.arange(self.p)[:, None]
        return (rows - lags) % self.d_in_

    def forward(self, x, counter: MacCounter | None = None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != self.d_in:
            raise DimensionError(f"conv matrix of shape {self.shape} cannot act on block of shape {x.shape}")
        n = x.shape[1]
        shifted = x[self._taps()]  # (p, d_out, N)
        y = bmm(self.kernel[None, None, :], shifted.reshape(1, self.p, -1), counter)
        return y.reshape(self.d_out, n), (x, shifted)

    def backward(self, cache, gy):
        x, shifted = cache
        gy = np.asarray(gy, dtype=np.float64)
        gk = np.einsum("kin,in->k", shifted, gy)
        gx = np.zeros_like(x)
        np.add.at(gx, self._taps(), self.kernel[:, None, None] * gy[None])
        return gx, [gk]

    def _component_dims(self):
        return [(1, 1, self.p)]

    def _materialize(self):
        w = np.zeros(self.shape)
        for k, val in enumerate(self.kernel):
            for i in range(self.d_out_):
                w[i, (i - k) % self.d_in_] += val
        return w


@dataclass(frozen=True, eq=False, repr=False)
class Kronecker(StructuredMatrix):
    """``W = L (x) R`` with ``L`` (m1, n1) acting on the leading index."""

    l: np.ndarray
    r: np.ndarray
    family: ClassVar[str] = "kron"
    names: ClassVar[tuple[str, ...]] = ("r", "l")

    def __post_init__(self):
        object.__setattr__(self, "l", _frozen(self.l))
        object.__setattr__(self, "r", _frozen(self.r))
        if self.l.ndim != 2 or self.r.ndim != 2:
            raise DimensionError("Kronecker factors must be matrices")

    @property
    def shape(self):
        return (self.l.shape[0] * self.r.shape[0], self.l.shape[1] * self.r.shape[1])

    def params(self):
        return (self.r, self.l)

    def meta(self):
        return {
            "shape": list(self.shape),
            "out_factors": [self.l.shape[0], self.r.shape[0]],
            "in_factors": [self.l.shape[1], self.r.shape[1]],
        }

    @classmethod
    def from_meta(cls, meta, params):
        r, l = params
        return cls(l, r)

    def _stages(self):
        (m1, n1), (m2, n2) = self.l.shape, self.r.shape
        return (
            _Stage((n1, n2), (0, 1), 0, n1, m2, n2, True),
            _Stage((n1, m2), (1, 0), 1, m2, m1, n1, True),
        )

    def _post(self):
        return (self.r.shape[0], self.l.shape[0]), (1, 0)

    def _component_dims(self):
        return [(1,) + self.r.shape, (1,) + self.l.shape]

    def _materialize(self):
        return np.kron(self.l, self.r)


@dataclass(frozen=True, eq=False, repr=False)
class Monarch(StructuredMatrix):
    """``P L P^T R`` with block-diagonal ``L``, ``R`` of ``b`` blocks each.

    ``r`` has shape (b, q, d_in/b) and ``l`` has shape (b, d_out/b, q), where
    ``q = d_mid/b`` and ``d_mid`` is the width of the intermediate vector.
    ``P^T`` reads the intermediate vector as a (q, b) row-major array and
    transposes it; the output permutation does the same with (b, d_out/b).
    For square matrices with ``b = sqrt(d)`` this reproduces
    ``y[a, b] = sum_g L[b][a, g] sum_d R[g][b, d] x[g, d]``.
    """

    l: np.ndarray
    r: np.ndarray
    family: ClassVar[str] = "monarch"
    names: ClassVar[tuple[str, ...]] = ("r", "l")

    def __post_init__(self):
        object.__setattr__(self, "l", _frozen(self.l))
        object.__setattr__(self, "r", _frozen(self.r))
        if self.l.ndim != 3 or self.r.ndim != 3:
            raise DimensionError("Monarch blocks must be stacked as (b, rows, cols)")
        if self.l.shape[0] != self.r.shape[0] or self.l.shape[2] != self.r.shape[1]:
            raise DimensionError(f"Monarch blocks do not chain: l {self.l.shape}, r {self.r.shape}")

    @property
    def blocks(self):
        return self.r.shape[0]

    @property
    def d_mid(self):
        return self.r.shape[0] * self.r.shape[1]

    @property
    def shape(self):
        b = self.blocks
        return (b * self.l.shape[1], b * self.r.shape[2])

    def params(self):
        return (self.r, self.l)

    def meta(self):
        return {"shape": list(self.shape), "blocks": self.blocks, "d_mid": self.d_mid}

    @classmethod
    def from_meta(cls, meta, params):
        r, l = params
        return cls(l, r)

    def _stages(self):
        b, q, n_in = self.r.shape
        n_out = self.l.shape[1]
        return (
            _Stage((b, n_in), (0, 1), 0, b, q, n_in, False),
            _Stage((q, b), (1, 0), 1, b, n_out, q, False),
        )

    def _post(self):
        return (self.blocks, self.l.shape[1]), (1, 0)

    def _component_dims(self):
        return [self.r.shape, self.l.shape]

    def _materialize(self):
        b, q, _ = self.r.shape
        n_out = self.l.shape[1]
        big_r = _block_diag(self.r)
        big_l = _block_diag(self.l)
        p_mid = _transpose_permutation(q, b)  # maps flat (q, b) onto flat (b, q)
        p_out = _transpose_permutation(b, n_out)
        return p_out @ big_l @ p_mid @ big_r


def _block_diag(blocks: np.ndarray) -> np.ndarray:
    b, rows, cols = blocks.shape
    out = np.zeros((b * rows, b * cols))
    for k in range(b):
        out[k * rows:(k + 1) * rows, k * cols:(k + 1) * cols] = blocks[k]
    return out


def _transpose_permutation(rows: int, cols: int) -> np.ndarray:
    """Permutation matrix sending a flat (rows, cols) array to its transpose."""
    n = rows * cols
    p = np.zeros((n, n))
    for i in range(rows):
        for j in range(cols):
            p[j * rows + i, i * cols + j] = 1.0
    return p


class _TrainBase(StructuredMatrix):
    """Shared plumbing for TT and BTT chains."""

    out_factors: tuple[int, ...]
    in_factors: tuple[int, ...]
    ranks: tuple[int, ...]

    @property
    def c(self) -> int:
        return len(self.out_factors)

    @property
    def shape(self):
        return (math.prod(self.out_factors), math.prod(self.in_factors))

    def full_ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(self.ranks) + (1,)

    def component_names(self):
        return tuple(f"g{t}" for t in range(self.c, 0, -1))

    def meta(self):
        return {
            "shape": list(self.shape),
            "out_factors": list(self.out_factors),
            "in_factors": list(self.in_factors),
            "ranks": list(self.ranks),
        }

    def _block_extent(self, t: int) -> int:
        # block axes of core t (1-based): outputs after t, inputs before t
        return math.prod(self.out_factors[t:]) * math.prod(self.in_factors[:t - 1])

    def _stages(self):
        m, n, r = self.out_factors, self.in_factors, self.full_ranks()
        c = self.c
        stages = []
        for t in range(c, 0, -1):
            if t == c:
                pre_shape = tuple(n) + (1,)
                pre_axes = tuple(range(len(pre_shape)))
            else:
                pre_shape = tuple(m[t + 1:]) + tuple(n[:t]) + (r[t], m[t])
                k = len(pre_shape)
                pre_axes = (k - 1,) + tuple(range(k - 1))
            stages.append(
                _Stage(
                    pre_shape,
                    pre_axes,
                    c - t,
                    self._block_extent(t),
                    r[t - 1] * m[t - 1],
                    n[t - 1] * r[t],
                    self._shared,
                )
            )
        return tuple(stages)

    def _post(self):
        m = self.out_factors
        shape = tuple(m[1:]) + (1, m[0])
        k = len(shape)
        return shape, (k - 1,) + tuple(range(k - 1))

    def _component_dims(self):
        m, n, r = self.out_factors, self.in_factors, self.full_ranks()
        dims = []
        for t in range(self.c, 0, -1):
            batch = 1 if self._shared else self._block_extent(t)
            dims.append((batch, r[t - 1] * m[t - 1], n[t - 1] * r[t]))
        return dims

    def core(self, t: int) -> np.ndarray:
        """Core ``t`` (1-based) in its logical layout."""
        return self.params()[self.c - t]


def _check_chain(out_factors, in_factors, ranks):
    if len(out_factors) != len(in_factors) or len(out_factors) < 2:
        raise DimensionError("need matching output/input factorizations with at least 2 cores")
    if len(ranks) != len(out_factors) - 1:
        raise DimensionError(f"expected {len(out_factors) - 1} ranks, got {len(ranks)}")
    if any(int(r) < 1 for r in ranks):
        raise DomainError(f"ranks must be positive, got {ranks}")


@dataclass(frozen=True, eq=False, repr=False)
class TensorTrain(_TrainBase):
    """TT matrix from cores of shape (r_{t-1}, m_t, n_t, r_t), t = 1..c."""

    cores: tuple[np.ndarray, ...]
    family: ClassVar[str] = "tt"
    _shared: ClassVar[bool] = True

    def __post_init__(self):
        cores = tuple(_frozen(g) for g in self.cores)
        object.__setattr__(self, "cores", cores)
        if any(g.ndim != 4 for g in cores):
            raise DimensionError("TT cores must be 4-D (r_prev, m, n, r_next)")
        if cores[0].shape[0] != 1 or cores[-1].shape[3] != 1:
            raise DimensionError("boundary TT ranks must be 1")
        for a, b in zip(cores, cores[1:]):
            if a.shape[3] != b.shape[0]:
                raise DimensionError(f"TT core ranks do not chain: {a.shape} then {b.shape}")
        _check_chain(self.out_factors, self.in_factors, self.ranks)

    @property
    def out_factors(self):
        return tuple(g.shape[1] for g in self.cores)

    @property
    def in_factors(self):
        return tuple(g.shape[2] for g in self.cores)

    @property
    def ranks(self):
        return tuple(g.shape[3] for g in self.cores[:-1])

    def params(self):
        return tuple(reversed(self.cores))

    @classmethod
    def from_meta(cls, meta, params):
        return cls(tuple(reversed(tuple(params))))

    def _materialize(self):
        c = self.c
        operands = []
        for t, g in enumerate(self.cores, start=1):
            operands += [g, [_R + t - 1, _I + t, _J + t, _R + t]]
        out = [_I + t for t in range(1, c + 1)] + [_J + t for t in range(1, c + 1)]
        w = np.einsum(*operands, out, optimize=True)
        return w.reshape(self.shape)


# index labels for einsum sublists
_R, _I, _J = 0, 20, 40


@dataclass(frozen=True, eq=False, repr=False)
class BlockTensorTrain(_TrainBase):
    """Block tensor-train with block axes stored as leading batch axes.

    Core ``t`` is stored as a (B_t, r_{t-1} m_t, n_t r_t) stack where the
    batch index runs over (m_{t+1}..m_c, n_1..n_{t-1}) in row-major order.
    ``core(t)`` returns the logical view with axes
    (r_{t-1}, m_t, m_{t+1}..m_c, n_1..n_{t-1}, n_t, r_t).
    """

    out_factors: tuple[int, ...]
    in_factors: tuple[int, ...]
    ranks: tuple[int, ...]
    cores: tuple[np.ndarray, ...]
    family: ClassVar[str] = "btt"
    _shared: ClassVar[bool] = False

    def __post_init__(self):
        object.__setattr__(self, "out_factors", tuple(int(f) for f in self.out_factors))
        object.__setattr__(self, "in_factors", tuple(int(f) for f in self.in_factors))
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        _check_chain(self.out_factors, self.in_factors, self.ranks)
        r = self.full_ranks()
        for t in range(self.c - 1, 0, -1):
            limit = min(math.prod(self.out_factors[:t]), self.in_factors[t] * r[t + 1])
            if r[t] > limit:
                raise DomainError(
                    f"BTT rank r_{t}={r[t]} exceeds the exact-representation bound {limit}"
                )
        cores = tuple(_frozen(g) for g in self.cores)
        if len(cores) != self.c:
            raise DimensionError(f"expected {self.c} cores, got {len(cores)}")
        for t, g in enumerate(cores, start=1):
            want = self._storage_shape(t)
            if g.shape != want:
                raise DimensionError(f"BTT core {t} has shape {g.shape}, expected {want}")
        object.__setattr__(self, "cores", cores)

    def _storage_shape(self, t: int) -> tuple[int, int, int]:
        m, n, r = self.out_factors, self.in_factors, self.full_ranks()
        return (self._block_extent(t), r[t - 1] * m[t - 1], n[t - 1] * r[t])

    def _logical_shape(self, t: int) -> tuple[int, ...]:
        m, n, r = self.out_factors, self.in_factors, self.full_ranks()
        return (r[t - 1], m[t - 1]) + tuple(m[t:]) + tuple(n[:t - 1]) + (n[t - 1], r[t])

    @classmethod
    def from_logical(cls, cores: Sequence[np.ndarray]) -> "BlockTensorTrain":
        """Build from cores in the logical layout returned by ``core(t)``."""
        c = len(cores)
        out_factors = tuple(g.shape[1] for g in cores)
        in_factors = tuple(cores[t - 1].shape[-2] for t in range(1, c + 1))
        ranks = tuple(g.shape[-1] for g in cores[:-1])
        stored = []
        for t, g in enumerate(cores, start=1):
            g = np.asarray(g, dtype=np.float64)
            nb = g.ndim - 4  # number of block axes
            axes = tuple(range(2, 2 + nb)) + (0, 1, g.ndim - 2, g.ndim - 1)
            s = g.transpose(axes)
            stored.append(s.reshape(-1, g.shape[0] * g.shape[1], g.shape[-2] * g.shape[-1]))
        return cls(out_factors, in_factors, ranks, tuple(stored))

    def core(self, t: int) -> np.ndarray:
        m, n, r = self.out_factors, self.in_factors, self.full_ranks()
        blocks = tuple(m[t:]) + tuple(n[:t - 1])
        g = self.cores[t - 1].reshape(blocks + (r[t - 1], m[t - 1], n[t - 1], r[t]))
        nb = len(blocks)
        axes = (nb, nb + 1) + tuple(range(nb)) + (nb + 2, nb + 3)
        return g.transpose(axes)

    def params(self):
        return tuple(reversed(self.cores))

    @classmethod
    def from_meta(cls, meta, params):
        return cls(meta["out_factors"], meta["in_factors"], meta["ranks"], tuple(reversed(tuple(params))))

    def _materialize(self):
        c = self.c
        operands = []
        for t in range(1, c + 1):
            idx = [_R + t - 1, _I + t]
            idx += [_I + s for s in range(t + 1, c + 1)]
            idx += [_J + s for s in range(1, t)]
            idx += [_J + t, _R + t]
            operands += [self.core(t), idx]
        out = [_I + t for t in range(1, c + 1)] + [_J + t for t in range(1, c + 1)]
        w = np.einsum(*operands, out, optimize=True)
        return w.reshape(self.shape)


FAMILY_CLASSES = {
    cls.family: cls
    for cls in (Dense, LowRank, Convolution, Kronecker, Monarch, TensorTrain, BlockTensorTrain)
}


# --------------------------------------------------------------------------
# construction helpers


def component_shapes(
    family: str,
    d_out: int,
    d_in: int,
    *,
    cores: int = 2,
    rank: int | Sequence[int] = 1,
    blocks: int = 4,
    kernel: int = 3,
    d_mid: int | None = None,
) -> tuple[list[tuple[int, ...]], dict]:
    """Parameter shapes (component order) and metadata for a family."""
    if family == "dense":
        return [(d_out, d_in)], {"shape": [d_out, d_in]}
    if family == "lowrank":
        r = int(rank if isinstance(rank, (int, np.integer)) else rank[0])
        return [(r, d_in), (d_out, r)], {"shape": [d_out, d_in], "rank": r}
    if family == "conv":
        return [(kernel,)], {"shape": [d_out, d_in], "kernel_size": kernel}
    if family == "kron":
        m = balanced_factorization(d_out, 2).factors
        n = balanced_factorization(d_in, 2).factors
        return [(m[1], n[1]), (m[0], n[0])], {"shape": [d_out, d_in]}
    if family == "monarch":
        b = blocks
        mid = min(d_out, d_in) if d_mid is None else d_mid
        if d_out % b or d_in % b or mid % b:
            raise DomainError(f"{b} blocks do not divide shape {d_out}x{d_in} (mid {mid})")
        q = mid // b
        return [(b, q, d_in // b), (b, d_out // b, q)], {"shape": [d_out, d_in], "blocks": b, "d_mid": mid}
    if family in ("tt", "btt"):
        m = balanced_factorization(d_out, cores).factors
        n = balanced_factorization(d_in, cores).factors
        if family == "btt":
            ranks = clipped_ranks(rank, m, n)
        else:
            ranks = tuple([int(rank)] * (cores - 1)) if isinstance(rank, (int, np.integer)) else tuple(rank)
        r = (1,) + ranks + (1,)
        shapes = []
        for t in range(cores, 0, -1):
            if family == "tt":
                shapes.append((r[t - 1], m[t - 1], n[t - 1], r[t]))
            else:
                batch = math.prod(m[t:]) * math.prod(n[:t - 1])
                shapes.append((batch, r[t - 1] * m[t - 1], n[t - 1] * r[t]))
        meta = {"shape": [d_out, d_in], "out_factors": list(m), "in_factors": list(n), "ranks": list(ranks)}
        return shapes, meta
    raise DomainError(f"unknown family {family!r}; expected one of {FAMILIES}")


def from_params(family: str, meta: dict, params: Sequence[np.ndarray]) -> StructuredMatrix:
    try:
        cls = FAMILY_CLASSES[family]
    except KeyError:
        raise DomainError(f"unknown family {family!r}; expected one of {FAMILIES}") from None
    return cls.from_meta(meta, params)


def build(
    family: str,
    d_out: int,
    d_in: int | None = None,
    *,
    cores: int = 2,
    rank: int | Sequence[int] = 1,
    blocks: int = 4,
    kernel: int = 3,
    d_mid: int | None = None,
    stds: float | Sequence[float] = 1.0,
    seed: int = 0,
) -> StructuredMatrix:
    """Random instance of ``family`` with Gaussian components.

    ``stds`` is one standard deviation for every component or one per
    component (component order). Non-square layers factor their output and
    input sizes independently.
    """
    d_in = d_out if d_in is None else d_in
    shapes, meta = component_shapes(
        family, d_out, d_in, cores=cores, rank=rank, blocks=blocks, kernel=kernel, d_mid=d_mid
    )
    if isinstance(stds, (int, float, np.floating)):
        stds = [float(stds)] * len(shapes)
    if len(stds) != len(shapes):
        raise DimensionError(f"expected {len(shapes)} standard deviations, got {len(stds)}")
    gen = rng(seed)
    params = [gen.normal(0.0, s, size=shape) for s, shape in zip(stds, shapes)]
    return from_params(family, meta, params)


# module-level aliases for the operation names used throughout the docs


def mvm(m: StructuredMatrix, x, counter: MacCounter | None = None) -> np.ndarray:
    return m.mvm(x, counter)


def mvm_batched(m: StructuredMatrix, x, counter: MacCounter | None = None) -> np.ndarray:
    return m.mvm_batched(x, counter)


def materialize(m: StructuredMatrix, cap: int = MATERIALIZE_CAP) -> np.ndarray:
    return m.materialize(cap)


def components(m: StructuredMatrix) -> list[DenseComponent]:
    return m.components()


__all__ = [
    "AxisFactorization",
    "BlockTensorTrain",
    "Convolution",
    "Dense",
    "DenseComponent",
    "FAMILIES",
    "Kronecker",
    "LowRank",
    "MATERIALIZE_CAP",
    "Monarch",
    "StructuredMatrix",
    "TensorTrain",
    "balanced_factorization",
    "btt_rank_bounds",
    "build",
    "clipped_ranks",
    "component_shapes",
    "components",
    "from_params",
    "materialize",
    "mvm",
    "mvm_batched",
]
