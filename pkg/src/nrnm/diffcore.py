"""Dense 2-D arrays with define-by-run reverse-mode differentiation.

Every forward pass builds a fresh :class:`Graph`.  Operations append a record
(kind, inputs, output, forward fn, backward fn) while a graph is active; the
record list is topologically ordered by construction, so ``backward`` simply
walks it in reverse and ``Graph.replay`` walks it forward.

Only rank-2 arrays exist.  Batched sequence work stacks the batch along rows;
the ``group_*`` primitives treat equal-sized row blocks as independent
matrices, which is how per-sequence attention is done without rank-3 arrays.
"""
from __future__ import annotations

import itertools
from collections import OrderedDict
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "DiffArray", "Graph", "ParamSet", "DimensionError", "ContractError",
    "GradientCheckError", "no_grad", "set_precision", "get_dtype", "backward",
    "finite_diff_check", "constant",
    "matmul", "add", "sub", "mul", "neg", "sigmoid", "tanh", "relu", "exp",
    "log", "clip", "softmax_rows", "log_softmax_rows", "layer_norm",
    "concat_cols", "concat_rows", "slice_cols", "take_rows", "reshape",
    "flatten", "transpose", "sum_all", "sum_rows", "pick", "group_matmul",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an engine call was violated."""


class GradientCheckError(RuntimeError):
    """The function under a gradient check produced a non-finite value."""


_DTYPE = np.float64
_ids = itertools.count()
_graph_stack: list["Graph"] = []
_grad_enabled = [True]


def set_precision(bits: int) -> None:
    """Select 64-bit (verification) or 32-bit (speed) arrays for new data."""
    global _DTYPE
    if bits == 64:
        _DTYPE = np.float64
    elif bits == 32:
        _DTYPE = np.float32
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def get_dtype():
    return _DTYPE


def _as2d(value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype.kind != "f":
        arr = arr.astype(_DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"only rank-2 arrays are supported, got shape {arr.shape}")
    return arr


class DiffArray:
    """A 2-D array that may take part in a recorded computation."""

    __slots__ = ("value", "grad", "requires_grad", "node_id", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        if type(value) is not np.ndarray or value.ndim != 2 or value.dtype.kind != "f":
            value = _as2d(value)
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def T(self) -> "DiffArray":
        return transpose(self)

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() needs a 1x1 array, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"DiffArray{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, DiffArray):
            raise TypeError("division is only defined by a scalar constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> DiffArray:
    """Wrap data that never needs a gradient."""
    if isinstance(value, DiffArray):
        return value
    return DiffArray(np.asarray(value, dtype=_DTYPE))


class _Record:
    __slots__ = ("kind", "inputs", "out", "forward", "backward")

    def __init__(self, kind, inputs, out, forward, backward):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.forward = forward
        self.backward = backward


class Graph:
    """Ordered operation records for one forward pass.

    Use as a context manager; operations executed inside it are recorded.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def replay(self) -> None:
        """Recompute every recorded output from its (current) input values."""
        for rec in self.records:
            rec.out.value = rec.forward(*[x.value for x in rec.inputs])


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        self._prev = _grad_enabled[0]
        _grad_enabled[0] = False

    def __exit__(self, *exc):
        _grad_enabled[0] = self._prev


def _apply(kind: str, forward: Callable, bwd: Callable, *inputs: DiffArray) -> DiffArray:
    value = forward(*[x.value for x in inputs])
    track = (
        _grad_enabled[0]
        and bool(_graph_stack)
        and any(x.requires_grad for x in inputs)
    )
    out = DiffArray(value, requires_grad=track)
    if track:
        _graph_stack[-1].records.append(_Record(kind, inputs, out, forward, bwd))
    return out


def _wrap(x) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    return DiffArray(np.asarray(x, dtype=_DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(kind: str, a: DiffArray, b: DiffArray) -> None:
    (m1, n1), (m2, n2) = a.shape, b.shape
    if (m1 == m2 or m1 == 1 or m2 == 1) and (n1 == n2 or n1 == 1 or n2 == 1):
        return
    raise DimensionError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}")


# elementwise ---------------------------------------------------------------

def add(a, b) -> DiffArray:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _apply(
        "add", np.add,
        lambda g, out, x, y: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        a, b,
    )


def sub(a, b) -> DiffArray:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _apply(
        "sub", np.subtract,
        lambda g, out, x, y: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        a, b,
    )


def mul(a, b) -> DiffArray:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)
    sa, sb = a.shape, b.shape
    return _apply(
        "mul", np.multiply,
        lambda g, out, x, y: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)),
        a, b,
    )


def neg(a: DiffArray) -> DiffArray:
    return _apply("neg", np.negative, lambda g, out, x: (-g,), a)


def sigmoid(a: DiffArray) -> DiffArray:
    return _apply("sigmoid", expit, lambda g, out, x: (g * out * (1.0 - out),), a)


def tanh(a: DiffArray) -> DiffArray:
    return _apply("tanh", np.tanh, lambda g, out, x: (g * (1.0 - out * out),), a)


def relu(a: DiffArray) -> DiffArray:
    return _apply(
        "relu", lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0),), a
    )


def exp(a: DiffArray) -> DiffArray:
    return _apply("exp", np.exp, lambda g, out, x: (g * out,), a)


def log(a: DiffArray) -> DiffArray:
    return _apply("log", np.log, lambda g, out, x: (g / x,), a)


def clip(a: DiffArray, lo: float, hi: float) -> DiffArray:
    """Clamp values; the gradient is zero where clamping was active."""
    return _apply(
        "clip",
        lambda x: np.clip(x, lo, hi),
        lambda g, out, x: (g * ((x >= lo) & (x <= hi)),),
        a,
    )


# linear algebra & reductions ----------------------------------------------

def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    a, b = _wrap(a), _wrap(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    return _apply("matmul", np.matmul, lambda g, out, x, y: (g @ y.T, x.T @ g), a, b)


def transpose(a: DiffArray) -> DiffArray:
    return _apply(
        "transpose", lambda x: x.T, lambda g, out, x: (g.T,), a
    )


def sum_all(a: DiffArray) -> DiffArray:
    return _apply(
        "sum_all",
        lambda x: x.sum().reshape(1, 1),
        lambda g, out, x: (np.full_like(x, g[0, 0]),),
        a,
    )


def sum_rows(a: DiffArray) -> DiffArray:
    """Sum across each row: [m x n] -> [m x 1]."""
    return _apply(
        "sum_rows",
        lambda x: x.sum(axis=1, keepdims=True),
        lambda g, out, x: (np.broadcast_to(g, x.shape).copy(),),
        a,
    )


def softmax_rows(a: DiffArray) -> DiffArray:
    def fwd(x):
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def bwd(g, out, x):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _apply("softmax_rows", fwd, bwd, a)


def log_softmax_rows(a: DiffArray) -> DiffArray:
    def fwd(x):
        z = x - x.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def bwd(g, out, x):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _apply("log_softmax_rows", fwd, bwd, a)


def layer_norm(a: DiffArray, gamma: DiffArray, beta: DiffArray, eps: float = 1e-5) -> DiffArray:
    """Row-wise normalisation with population variance, then affine."""
    n = a.cols
    if gamma.shape != (1, n) or beta.shape != (1, n):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be (1, {n})"
        )

    def normed(x):
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
        return xc * inv, inv

    def fwd(x, gm, bt):
        xhat, _ = normed(x)
        return xhat * gm + bt

    def bwd(g, out, x, gm, bt):
        xhat, inv = normed(x)
        gx = g * gm
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _apply("layer_norm", fwd, bwd, a, gamma, beta)


# structural ----------------------------------------------------------------

def concat_cols(parts: Sequence[DiffArray]) -> DiffArray:
    parts = [_wrap(p) for p in parts]
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise DimensionError(
                f"concat_cols: row counts differ {[q.shape for q in parts]}"
            )
    edges = np.cumsum([0] + [p.cols for p in parts])

    def bwd(g, out, *xs):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(xs)))

    return _apply("concat_cols", lambda *xs: np.concatenate(xs, axis=1), bwd, *parts)


def concat_rows(parts: Sequence[DiffArray]) -> DiffArray:
    parts = [_wrap(p) for p in parts]
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise DimensionError(
                f"concat_rows: column counts differ {[q.shape for q in parts]}"
            )
    edges = np.cumsum([0] + [p.rows for p in parts])

    def bwd(g, out, *xs):
        return tuple(g[edges[i]:edges[i + 1]] for i in range(len(xs)))

    return _apply("concat_rows", lambda *xs: np.concatenate(xs, axis=0), bwd, *parts)


def slice_cols(a: DiffArray, start: int, stop: int) -> DiffArray:
    if not 0 <= start < stop <= a.cols:
        raise DimensionError(f"slice_cols: [{start}:{stop}] outside {a.shape}")

    def bwd(g, out, x):
        full = np.zeros_like(x)
        full[:, start:stop] = g
        return (full,)

    return _apply("slice_cols", lambda x: x[:, start:stop], bwd, a)


def take_rows(a: DiffArray, index) -> DiffArray:
    """Gather rows by index (repeats allowed); gradient scatter-adds."""
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= a.rows):
        raise DimensionError(f"take_rows: index out of range for {a.shape}")

    def bwd(g, out, x):
        full = np.zeros_like(x)
        np.add.at(full, index, g)
        return (full,)

    return _apply("take_rows", lambda x: x[index], bwd, a)


def reshape(a: DiffArray, rows: int, cols: int) -> DiffArray:
    """Row-major reshape."""
    if rows * cols != a.value.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as ({rows}, {cols})")
    shape = a.shape
    return _apply(
        "reshape",
        lambda x: x.reshape(rows, cols),
        lambda g, out, x: (g.reshape(shape),),
        a,
    )


def flatten(a: DiffArray) -> DiffArray:
    return reshape(a, 1, a.value.size)


def pick(a: DiffArray, cols) -> DiffArray:
    """Select one entry per row: out[i] = a[i, cols[i]] -> [m x 1]."""
    cols = np.asarray(cols, dtype=np.intp)
    if cols.shape != (a.rows,):
        raise DimensionError(f"pick: need {a.rows} column indices, got {cols.shape}")
    rows = np.arange(a.rows)

    def bwd(g, out, x):
        full = np.zeros_like(x)
        full[rows, cols] = g[:, 0]
        return (full,)

    return _apply("pick", lambda x: x[rows, cols][:, None], bwd, a)


def group_matmul(a: DiffArray, b: DiffArray, groups: int, transpose_b: bool = False) -> DiffArray:
    """Block-wise products of row groups.

    ``a`` is ``groups`` stacked [p x q] blocks and ``b`` is ``groups`` stacked
    [q x r] blocks (or [r x q] with ``transpose_b``); the result stacks the
    per-group products.
    """
    if a.rows % groups or b.rows % groups:
        raise DimensionError(
            f"group_matmul: {a.shape} and {b.shape} do not split into {groups} groups"
        )
    p, q = a.rows // groups, a.cols
    bq = b.rows // groups
    if (b.cols if transpose_b else bq) != q:
        raise DimensionError(f"group_matmul: inner dimensions differ for {a.shape} and {b.shape}")

    def fwd(x, y):
        x3 = x.reshape(groups, p, q)
        y3 = y.reshape(groups, bq, y.shape[1])
        if transpose_b:
            y3 = y3.transpose(0, 2, 1)
        r = np.matmul(x3, y3)
        return r.reshape(groups * p, r.shape[2])

    def bwd(g, out, x, y):
        x3 = x.reshape(groups, p, q)
        y3 = y.reshape(groups, bq, y.shape[1])
        g3 = g.reshape(groups, p, -1)
        if transpose_b:
            dx = np.matmul(g3, y3)
            dy = np.matmul(g3.transpose(0, 2, 1), x3)
        else:
            dx = np.matmul(g3, y3.transpose(0, 2, 1))
            dy = np.matmul(x3.transpose(0, 2, 1), g3)
        return dx.reshape(x.shape), dy.reshape(y.shape)

    return _apply("group_matmul", fwd, bwd, a, b)


# backward ------------------------------------------------------------------

def backward(loss: DiffArray, graph: Graph | None = None, params: "ParamSet | None" = None) -> None:
    """Populate ``.grad`` with d(loss)/d(node) for every node of ``graph``.

    Leaves and parameters without a path to ``loss`` end with zero gradient.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if graph is None:
        if not _graph_stack:
            raise ContractError("backward needs a graph (none active)")
        graph = _graph_stack[-1]
    records = graph.records
    touched: dict[int, DiffArray] = {}
    if params is not None:
        for p in params.values():
            p.grad = None
            touched[id(p)] = p
    for rec in records:
        rec.out.grad = None
        for x in rec.inputs:
            if x.requires_grad and id(x) not in touched:
                x.grad = None
                touched[id(x)] = x
    loss.grad = np.ones_like(loss.value)
    # gradients may alias one another (e.g. both operands of an add); they are
    # only ever combined out of place
    for rec in reversed(records):
        g = rec.out.grad
        if g is None:
            continue
        grads = rec.backward(g, rec.out.value, *[x.value for x in rec.inputs])
        for x, gx in zip(rec.inputs, grads):
            if x.requires_grad:
                x.grad = gx if x.grad is None else x.grad + gx
    for x in touched.values():
        if x.grad is None:
            x.grad = np.zeros_like(x.value)
    for rec in records:
        if rec.out.grad is None:
            rec.out.grad = np.zeros_like(rec.out.value)


# parameters ----------------------------------------------------------------

class ParamSet(OrderedDict):
    """Named learnable arrays; insertion order is the canonical order."""

    def add(self, name: str, value) -> DiffArray:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = DiffArray(np.array(value, dtype=_DTYPE), requires_grad=True, name=name)
        self[name] = p
        return p

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = np.zeros_like(p.value)

    def size(self) -> int:
        return sum(p.value.size for p in self.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self) ^ set(arrays)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, p in self.items():
            v = np.asarray(arrays[k])
            if v.shape != p.shape:
                raise DimensionError(f"parameter {k!r}: shape {v.shape} != {p.shape}")
            p.value = v.astype(p.value.dtype, copy=True)

    def grads(self) -> dict[str, np.ndarray]:
        """Copies of the current gradients (zeros where none was computed)."""
        return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
                for k, p in self.items()}


def _coordinates(params: ParamSet, sample: int, seed: int) -> list[tuple[str, int]]:
    names = list(params)
    sizes = [params[n].value.size for n in names]
    total = sum(sizes)
    if sample > total:
        raise ContractError(f"sample={sample} exceeds parameter count {total}")
    rng = np.random.default_rng(seed)
    offsets = np.cumsum([0] + sizes)
    chosen: list[int] = []
    if sample >= len(names):
        # one coordinate from every parameter first, so no group goes unchecked
        chosen = [int(offsets[i] + rng.integers(sizes[i])) for i in range(len(names))]
    remaining = np.setdiff1d(np.arange(total), chosen)
    extra = rng.choice(remaining, size=sample - len(chosen), replace=False)
    chosen.extend(int(c) for c in extra)
    out = []
    for c in chosen:
        i = int(np.searchsorted(offsets, c, side="right") - 1)
        out.append((names[i], c - int(offsets[i])))
    return out


def finite_diff_check(
    f: Callable[[ParamSet], DiffArray],
    params: ParamSet,
    h: float = 1e-6,
    sample: int = 50,
    seed: int = 0,
    grads: dict[str, np.ndarray] | None = None,
    extended: bool = True,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the parameter set to a scalar loss built from engine ops.  If
    ``grads`` is given it is used in place of the analytic gradient (to check
    that the checker flags a wrong gradient).

    The analytic gradient is computed at the current precision.  With
    ``extended`` the perturbed losses are evaluated in ``np.longdouble``
    (80-bit on x86), which removes most of the cancellation error of the
    central difference for coordinates whose gradient is small next to the
    loss.  Where ``longdouble`` is plain double this changes nothing.
    """
    global _DTYPE
    if h <= 0:
        raise ContractError("h must be positive")

    def scalar() -> float:
        with no_grad():
            out = f(params)
        val = out.value[0, 0] if isinstance(out, DiffArray) else out
        if not np.isfinite(val):
            raise GradientCheckError(f"loss evaluated to non-finite value {val}")
        return val

    if grads is None:
        with Graph() as g:
            loss = f(params)
            if not isinstance(loss, DiffArray) or not np.isfinite(loss.value).all():
                raise GradientCheckError("loss is not a finite DiffArray")
            if loss.requires_grad:
                backward(loss, g, params)
            else:
                params.zero_grad()
        grads = {k: v.copy() for k, v in params.grads().items()}

    coords = _coordinates(params, sample, seed)
    saved = {name: p.value for name, p in params.items()}
    saved_dtype = _DTYPE
    if extended:
        _DTYPE = np.longdouble
        for name, p in params.items():
            p.value = saved[name].astype(np.longdouble)
    worst = 0.0
    try:
        for name, idx in coords:
            flat = params[name].value.reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + h
            fp = scalar()
            flat[idx] = orig - h
            fm = scalar()
            flat[idx] = orig
            numeric = float((fp - fm) / (2 * h))
            analytic = float(grads[name].reshape(-1)[idx])
            rel = abs(analytic - numeric) / max(1e-12, abs(analytic) + abs(numeric))
            worst = max(worst, rel)
    finally:
        _DTYPE = saved_dtype
        for name, p in params.items():
            p.value = saved[name]
    return worst

