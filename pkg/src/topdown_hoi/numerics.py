"""Dense float64 tensors with tape-based reverse-mode gradients.

Operations only record onto a :class:`Graph` while one is active (``with
Graph() as g``); outside a graph they run as plain numpy, which is what the
finite-difference oracle relies on for speed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, log_expit

MAX_RANK = 3


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    """Float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _validate(arr, "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Copy without gradient tracking; backward never reaches it."""
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _validate(arr: np.ndarray, where: str) -> None:
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"{where}: rank {arr.ndim} exceeds {MAX_RANK}")
    if arr.size == 0 or any(s <= 0 for s in arr.shape):
        raise ShapeError(f"{where}: extents must be positive, got {arr.shape}")
    if not np.isfinite(arr).all():
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0]) if arr.ndim else ()
        raise NumericError(f"{where}: non-finite value at index {bad}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Graph:
    """Ordered tape of executed operations.

    A graph supports exactly one ``backward``; call :meth:`reset` to reuse it.
    """

    nodes: list[_Node] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)
    produced: set[int] = field(default_factory=set)
    _done: bool = False

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def reset(self) -> None:
        self.nodes.clear()
        self.leaves.clear()
        self.produced.clear()
        self._done = False

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], backward, op: str) -> None:
        produced = self.produced
        for p in parents:
            if p.requires_grad and id(p) not in produced:
                self.leaves[id(p)] = p
        self.nodes.append(_Node(out, parents, backward, op))
        produced.add(id(out))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate adjoints from ``loss`` to every recorded leaf.

        Leaf ``.grad`` slots are accumulated into. Leaves that were detached
        or never used receive nothing.
        """
        if self._done:
            raise GraphError("backward already ran on this graph; reset() first")
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise GraphError("graph is empty")
        self._done = True
        adj: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for node in reversed(self.nodes):
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            for p, gp in zip(node.parents, node.backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                k = id(p)
                prev = adj.get(k)
                adj[k] = gp if prev is None else prev + gp
        out: dict[Tensor, np.ndarray] = {}
        for k, leaf in self.leaves.items():
            g = adj.get(k)
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            out[leaf] = g
        return out


_ACTIVE: list[Graph] = []


def current_graph() -> Graph | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _emit(arr: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    arr = np.asarray(arr, dtype=np.float64)
    _validate(arr, op)
    out = Tensor._wrap(arr)
    g = current_graph()
    if g is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        g._record(out, parents, backward, op)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _axis(x: Tensor, axis: int, op: str) -> int:
    nd = x.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {nd}")
    return axis % nd


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "div")
    if np.any(b.data == 0):
        idx = tuple(int(i) for i in np.argwhere(b.data == 0)[0])
        raise NumericError(f"div: zero divisor at index {idx}")
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the adjoint to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "maximum")
    pick = a.data >= b.data
    return _emit(np.where(pick, a.data, b.data), (a, b),
                 lambda g: (g * pick, g * ~pick), "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the adjoint to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "minimum")
    pick = a.data <= b.data
    return _emit(np.where(pick, a.data, b.data), (a, b),
                 lambda g: (g * pick, g * ~pick), "minimum")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    A rank-2 operand against a rank-3 one is shared across the batch axis;
    its gradient is summed over that axis.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch extents differ in {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if ga.ndim > ad.ndim:
            ga = ga.sum(axis=0)
        if gb.ndim > bd.ndim:
            gb = gb.sum(axis=0)
        return ga, gb

    return _emit(out, (a, b), back, "matmul")


# ----------------------------------------------------------------- unary ops


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _emit(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_scalar(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _emit(x.data + float(c), (x,), lambda g: (g,), "add_scalar")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    x = as_tensor(x)
    xd = x.data
    return _emit(log_expit(xd), (x,), lambda g: (g * expit(-xd),), "log_sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    _domain(x.data > 0, "log")
    xd = x.data
    return _emit(np.log(xd), (x,), lambda g: (g / xd,), "log")


def log1p(x) -> Tensor:
    x = as_tensor(x)
    _domain(x.data > -1, "log1p")
    xd = x.data
    return _emit(np.log1p(xd), (x,), lambda g: (g / (1.0 + xd),), "log1p")


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _emit(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,), "relu")


def abs_(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)
    return _emit(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def _domain(ok: np.ndarray, op: str) -> None:
    if not np.all(ok):
        idx = tuple(int(i) for i in np.argwhere(~ok)[0]) if ok.ndim else ()
        raise NumericError(f"{op}: argument outside domain at index {idx}")


_ELEMENTWISE = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log1p": log1p,
    "neg": neg,
    "log": log,
    "relu": relu,
    "abs": abs_,
    "log_sigmoid": log_sigmoid,
}


def elementwise(x, f: str, c: float | None = None) -> Tensor:
    """Apply a named pointwise function; ``scale`` takes the factor ``c``."""
    if f == "scale":
        if c is None:
            raise ValueError("elementwise('scale') needs a factor")
        return scale(x, c)
    try:
        fn = _ELEMENTWISE[f]
    except KeyError:
        raise ValueError(f"unknown elementwise function {f!r}") from None
    return fn(x)


# ------------------------------------------------------------ normalisation


def softmax_axis(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _axis(x, axis, "softmax")
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _emit(y, (x,), back, "softmax")


def log_softmax_axis(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _axis(x, axis, "log_softmax")
    z = x.data - x.data.max(axis=ax, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=ax, keepdims=True))
    y = np.exp(out)

    def back(g):
        return (g - y * g.sum(axis=ax, keepdims=True),)

    return _emit(out, (x,), back, "log_softmax")


def layer_norm(x, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise each slice along ``axis`` to zero mean and unit variance.

    No learned gain or bias.
    """
    x = as_tensor(x)
    ax = _axis(x, axis, "layer_norm")
    n = x.shape[ax]
    if n < 2:
        raise ShapeError(f"layer_norm: slice length {n} < 2")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=ax, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gs = g.sum(axis=ax, keepdims=True)
        gx = (g * xhat).sum(axis=ax, keepdims=True)
        return (inv / n * (n * g - gs - xhat * gx),)

    return _emit(xhat, (x,), back, "layer_norm")


def reduce(x, axis: int | None = None, kind: str = "sum", order_free: bool = False) -> Tensor:
    """Sum or mean over one axis, or over everything when ``axis`` is None.

    ``order_free`` sums each slice in sorted order, so the result is
    bit-identical under any permutation along ``axis``.
    """
    x = as_tensor(x)
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    shape = x.shape
    if axis is None:
        n = x.size
        out = (np.sort(x.data, axis=None) if order_free else x.data).sum()
        if kind == "mean":
            out = out / n
        f = 1.0 / n if kind == "mean" else 1.0
        return _emit(out, (x,), lambda g: (np.full(shape, g * f),), f"reduce_{kind}")
    ax = _axis(x, axis, "reduce")
    n = shape[ax]
    out = (np.sort(x.data, axis=ax) if order_free else x.data).sum(axis=ax)
    f = 1.0 / n if kind == "mean" else 1.0
    if kind == "mean":
        out = out / n

    def back(g):
        return (np.broadcast_to(np.expand_dims(g * f, ax), shape).copy(),)

    return _emit(out, (x,), back, f"reduce_{kind}")


def sum_(x, axis: int | None = None) -> Tensor:
    return reduce(x, axis, "sum")


def mean(x, axis: int | None = None, order_free: bool = False) -> Tensor:
    return reduce(x, axis, "mean", order_free)


# ---------------------------------------------------------------- structure


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError("transpose needs rank >= 2")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _emit(out, (x,), lambda g: (g.reshape(old),), "reshape")


def take(x, idx) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate adjoints."""
    x = as_tensor(x)
    shape = x.shape
    out = np.array(x.data[idx], dtype=np.float64)

    def back(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(out, (x,), back, "take")


def expand(x, shape: Sequence[int]) -> Tensor:
    """Explicit duplication of ``x`` to ``shape`` under numpy broadcast rules.

    This is the only broadcasting path; binary ops require equal shapes.
    """
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from None
    src = x.shape
    lead = len(shape) - len(src)

    def back(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        keep = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return _emit(out, (x,), back, "expand")


def concat(xs: Iterable, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    if not xs:
        raise ShapeError("concat of nothing")
    ax = _axis(xs[0], axis, "concat")
    try:
        out = np.concatenate([x.data for x in xs], axis=ax)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    cuts = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _emit(out, xs, lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def stack(xs: Iterable, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    if not xs:
        raise ShapeError("stack of nothing")
    for x in xs[1:]:
        _same_shape(xs[0], x, "stack")
    out = np.stack([x.data for x in xs], axis=axis)
    ax = axis % out.ndim

    def back(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(xs)))

    return _emit(out, xs, back, "stack")


# ------------------------------------------------------------ verification


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    rel_tol: float
    per_param: dict[str, float]
    worst: list[tuple[str, float]]
    n_coords: int

    def as_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "passed": self.passed,
            "rel_tol": self.rel_tol,
            "n_coords": self.n_coords,
            "per_param": self.per_param,
            "worst": [list(w) for w in self.worst],
        }


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    rel_tol: float = 1e-4,
    atol: float = 1e-8,
    max_coords: int | None = None,
    directions: int = 0,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads the parameters in place. Relative error
    is ``|a - n| / max(|a|, |n|, atol / rel_tol)`` so gradients far below the
    round-off level of the difference quotient are judged absolutely.

    ``max_coords`` caps the coordinates probed per tensor (a seeded sample,
    always including the largest-gradient entry); ``directions`` adds that
    many random-direction probes per tensor, which exercise every coordinate
    at once.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if not isinstance(params, dict):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    with Graph() as g:
        loss = f()
    g.backward(loss)
    analytic = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}

    def value() -> float:
        v = f().data
        if not np.isfinite(v):
            raise NumericError("finite_diff_check: objective is not finite")
        return float(v)

    rng = np.random.default_rng(seed)
    floor = atol / rel_tol if rel_tol > 0 else atol
    per_param: dict[str, float] = {}
    n_coords = 0
    for name, p in params.items():
        ga = analytic[name]
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            top = int(np.argmax(np.abs(ga).reshape(-1)))
            rest = rng.choice(np.delete(coords, top), size=max_coords - 1, replace=False)
            coords = np.sort(np.concatenate([[top], rest]))
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, _rel_err(float(ga.reshape(-1)[i]), num, floor))
            n_coords += 1
        for _ in range(directions):
            v = rng.standard_normal(flat.size)
            v /= np.linalg.norm(v)
            orig = flat.copy()
            flat[:] = orig + h * v
            fp = value()
            flat[:] = orig - h * v
            fm = value()
            flat[:] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, _rel_err(float(ga.reshape(-1) @ v), num, floor))
            n_coords += 1
        per_param[name] = worst
    ranked = sorted(per_param.items(), key=lambda kv: -kv[1])
    mx = ranked[0][1] if ranked else 0.0
    return GradCheckReport(mx, mx <= rel_tol, rel_tol, per_param, ranked[:5], n_coords)
